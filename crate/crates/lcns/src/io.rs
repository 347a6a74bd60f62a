//! Persistence: binary field snapshots, CSV export, and the run manifest.
//! All writes go through a temp-then-rename step so interrupted runs never
//! leave partial files behind.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::{Grid, ScalarField, VectorField};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"LCNS";
pub const SNAPSHOT_VERSION: u32 = 1;

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serialize one or more same-grid components (row-major, x fastest) behind
/// a fixed header: magic, version, dim, extents, spacings, component count.
pub fn write_snapshot(path: &Path, grid: &Grid, comps: &[&[f64]]) -> Result<()> {
    let mut out = Vec::with_capacity(64 + comps.len() * grid.n_points() * 8);
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    out.extend_from_slice(&(grid.dim as u32).to_le_bytes());
    for a in 0..3 {
        out.extend_from_slice(&(grid.extents[a] as u32).to_le_bytes());
    }
    for a in 0..3 {
        out.extend_from_slice(&grid.spacing[a].to_le_bytes());
    }
    out.extend_from_slice(&(comps.len() as u32).to_le_bytes());
    for comp in comps {
        if comp.len() != grid.n_points() {
            return Err(Error::GridMismatch(format!(
                "snapshot component has {} values, grid has {}",
                comp.len(),
                grid.n_points()
            )));
        }
        for v in comp.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &out)
}

pub fn write_scalar_snapshot(path: &Path, s: &ScalarField) -> Result<()> {
    write_snapshot(path, &s.grid, &[&s.data])
}

pub fn write_vector_snapshot(path: &Path, v: &VectorField) -> Result<()> {
    let comps: Vec<&[f64]> = v.comps.iter().map(|c| c.as_slice()).collect();
    write_snapshot(path, &v.grid, &comps)
}

pub fn read_snapshot(path: &Path) -> Result<(Grid, Vec<Vec<f64>>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?
        .read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::SnapshotFormat("truncated snapshot".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != SNAPSHOT_MAGIC {
        return Err(Error::SnapshotFormat("bad magic bytes".into()));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    let f64_at = |s: &[u8]| f64::from_le_bytes(s.try_into().unwrap());
    let version = u32_at(take(&mut pos, 4)?);
    if version != SNAPSHOT_VERSION {
        return Err(Error::SnapshotFormat(format!("unsupported version {version}")));
    }
    let dim = u32_at(take(&mut pos, 4)?) as usize;
    let mut extents = [0usize; 3];
    for e in extents.iter_mut() {
        *e = u32_at(take(&mut pos, 4)?) as usize;
    }
    let mut spacing = [0f64; 3];
    for s in spacing.iter_mut() {
        *s = f64_at(take(&mut pos, 8)?);
    }
    if dim == 0 || dim > 3 {
        return Err(Error::SnapshotFormat(format!("bad dimension {dim}")));
    }
    let lengths: Vec<f64> =
        (0..dim).map(|a| spacing[a] * (extents[a].saturating_sub(1)) as f64).collect();
    let grid = Grid::new(dim, &extents[..dim], &lengths)?;
    let ncomp = u32_at(take(&mut pos, 4)?) as usize;
    let n = grid.n_points();
    let mut comps = Vec::with_capacity(ncomp);
    for _ in 0..ncomp {
        let raw = take(&mut pos, n * 8)?;
        comps.push(raw.chunks_exact(8).map(f64_at).collect());
    }
    if pos != bytes.len() {
        return Err(Error::SnapshotFormat("trailing bytes".into()));
    }
    Ok((grid, comps))
}

/// Headered CSV with full f64 round-trip precision.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// CSV variant with one leading string column (phase labels and the like).
pub fn write_labeled_csv(
    path: &Path,
    header: &[&str],
    rows: &[(String, Vec<f64>)],
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for (label, row) in rows {
        out.push_str(label);
        for v in row {
            out.push(',');
            out.push_str(&format!("{v:.16e}"));
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?
        .read_to_end(&mut bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Run manifest: structured text keyed by the config hash. Deliberately
/// carries no wall-clock data so identical runs produce identical bytes.
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    out_dir: PathBuf,
    artifacts: Vec<(String, String)>,
    certificates: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config_bytes: &[u8], seed: u64, out_dir: &Path) -> Self {
        Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: sha256_hex(config_bytes),
            seed,
            out_dir: out_dir.to_path_buf(),
            artifacts: Vec::new(),
            certificates: Vec::new(),
        }
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    /// Record an artifact (path relative to the output directory) and hash
    /// its current on-disk content.
    pub fn add_artifact(&mut self, rel_path: &str) -> Result<()> {
        let hash = sha256_file(&self.out_dir.join(rel_path))?;
        self.artifacts.push((rel_path.to_string(), hash));
        Ok(())
    }

    pub fn add_certificate_line(&mut self, line: String) {
        self.certificates.push(line);
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("command = {}\n", self.command));
        s.push_str(&format!("version = {}\n", self.version));
        s.push_str(&format!("config_sha256 = {}\n", self.config_hash));
        s.push_str(&format!("seed = {}\n", self.seed));
        let mut artifacts = self.artifacts.clone();
        artifacts.sort();
        s.push_str("\n[artifacts]\n");
        for (path, hash) in &artifacts {
            s.push_str(&format!("{path} = {hash}\n"));
        }
        if !self.certificates.is_empty() {
            s.push_str("\n[certificates]\n");
            for line in &self.certificates {
                s.push_str(line);
                s.push('\n');
            }
        }
        s
    }

    pub fn write(&self) -> Result<PathBuf> {
        let path = self.out_dir.join("manifest.txt");
        atomic_write(&path, self.render().as_bytes())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::VectorField;
    use std::f64::consts::PI;

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::unit_box(2, 9).unwrap();
        let v = VectorField::from_fns(g, |c, p| {
            (PI * p[0]).sin() * (PI * p[1]).cos() + c as f64
        });
        let path = dir.path().join("field.bin");
        write_vector_snapshot(&path, &v).unwrap();
        let (g2, comps) = read_snapshot(&path).unwrap();
        assert_eq!(g2, g);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0], v.comps[0]);
        assert_eq!(comps[1], v.comps[1]);
    }

    #[test]
    fn snapshot_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::unit_box(1, 5).unwrap();
        let s = ScalarField::constant(g, 1.5);
        let path = dir.path().join("field.bin");
        write_scalar_snapshot(&path, &s).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_snapshot(&path), Err(Error::SnapshotFormat(_))));
        let path2 = dir.path().join("missing.bin");
        assert!(matches!(read_snapshot(&path2), Err(Error::MissingFile(_))));
    }

    #[test]
    fn csv_has_full_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("series.csv");
        let v = 0.1 + 0.2; // not representable exactly
        write_csv(&path, &["t", "value"], &[vec![0.0, v]]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,value");
        let cell = lines.next().unwrap().split(',').nth(1).unwrap().to_string();
        let back: f64 = cell.parse().unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn empty_series_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        write_csv(&path, &["a", "b"], &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "a,b\n");
    }

    #[test]
    fn manifest_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::unit_box(1, 5).unwrap();
        write_scalar_snapshot(&dir.path().join("a.bin"), &ScalarField::zeros(g)).unwrap();
        let build = || {
            let mut m = Manifest::new("forward", b"config text", 7, dir.path());
            m.add_artifact("a.bin").unwrap();
            m.add_certificate_line("PASS energy".into());
            m.render()
        };
        let r1 = build();
        let r2 = build();
        assert_eq!(r1, r2);
        assert!(r1.contains("config_sha256"));
        assert!(!r1.to_lowercase().contains("time:"));
    }
}
