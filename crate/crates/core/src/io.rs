//! Field checkpoints and mesh export.
//!
//! A checkpoint is two files. `NAME.bin` holds the node values as raw
//! little-endian `f64`, x index fastest, then y, then t, with no header.
//! `NAME.json` is the sidecar described by [`CheckpointMeta`]; the mask is
//! stored as run-length pairs `[label, count]` in the same node order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domains::AnnulusProblem;
use crate::error::{Error, Result};
use crate::solver::{classify_nodes, Grid, NodeLabel, RegionMask, ScalarField, SolveOptions, SolveReport};
use crate::verify::LevelSurface;

pub const CHECKPOINT_FORMAT: &str = "hstar-field-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub config_hash: Option<String>,
    pub grid: Grid,
    pub value_count: usize,
    pub mask: Vec<(NodeLabel, usize)>,
    pub problem: Option<AnnulusProblem>,
    pub options: Option<SolveOptions>,
    pub report: Option<SolveReport>,
}

impl CheckpointMeta {
    pub fn for_field(field: &ScalarField) -> Self {
        CheckpointMeta {
            format: CHECKPOINT_FORMAT.to_string(),
            config_hash: None,
            grid: field.grid().clone(),
            value_count: field.values().len(),
            mask: field.mask().to_rle(),
            problem: None,
            options: None,
            report: None,
        }
    }
}

/// Sidecar path for a checkpoint binary.
pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

pub fn save_checkpoint(bin: &Path, field: &ScalarField, meta: &CheckpointMeta) -> Result<()> {
    if meta.grid != *field.grid() || meta.value_count != field.values().len() || meta.mask != field.mask().to_rle() {
        return Err(Error::GridMismatch("sidecar does not describe this field".into()));
    }
    let bytes: Vec<u8> = field.values().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(bin, bytes)?;
    let mut js = serde_json::to_string_pretty(meta)?;
    js.push('\n');
    fs::write(sidecar_path(bin), js)?;
    Ok(())
}

/// Reads a checkpoint. When the sidecar carries a problem, the mask is rebuilt
/// by classification so cut fractions are restored, and must agree with the
/// stored labels.
pub fn load_checkpoint(bin: &Path) -> Result<(ScalarField, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(sidecar_path(bin))?)?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::GridMismatch(format!("unknown checkpoint format {:?}", meta.format)));
    }
    if meta.value_count != meta.grid.len() {
        return Err(Error::GridMismatch(format!(
            "value count {} for a grid of {} nodes",
            meta.value_count,
            meta.grid.len()
        )));
    }
    let bytes = fs::read(bin)?;
    if bytes.len() != 8 * meta.value_count {
        return Err(Error::GridMismatch(format!(
            "binary holds {} bytes, expected {}",
            bytes.len(),
            8 * meta.value_count
        )));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let labels = RegionMask::labels_from_rle(&meta.mask);
    let mask = match &meta.problem {
        Some(problem) => {
            let mask = classify_nodes(&meta.grid, problem)?;
            if mask.labels() != labels.as_slice() {
                return Err(Error::GridMismatch("stored mask disagrees with the problem".into()));
            }
            mask
        }
        None => RegionMask::from_labels(&meta.grid, labels)?,
    };
    let field = ScalarField::new(meta.grid.clone(), mask, values)?;
    Ok((field, meta))
}

/// ASCII PLY with per-vertex normal and `<normal, Z>` as property `pairing`.
pub fn write_ply<W: Write>(out: W, surface: &LevelSurface, comments: &[String]) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    for c in comments {
        writeln!(w, "comment {}", c.replace('\n', " "))?;
    }
    writeln!(w, "comment level {}", surface.level)?;
    writeln!(w, "element vertex {}", surface.vertices.len())?;
    for name in ["x", "y", "z", "nx", "ny", "nz", "pairing"] {
        writeln!(w, "property double {name}")?;
    }
    writeln!(w, "element face {}", surface.triangles.len())?;
    writeln!(w, "property list uchar int vertex_indices")?;
    writeln!(w, "end_header")?;
    for ((v, n), q) in surface.vertices.iter().zip(&surface.normals).zip(&surface.pairing) {
        writeln!(w, "{} {} {} {} {} {} {}", v[0], v[1], v[2], n[0], n[1], n[2], q)?;
    }
    for t in &surface.triangles {
        writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_ply(path: &Path, surface: &LevelSurface, comments: &[String]) -> Result<()> {
    write_ply(fs::File::create(path)?, surface, comments)
}
