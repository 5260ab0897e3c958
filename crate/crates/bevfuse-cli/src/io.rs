//! File formats: PGM image dumps, CSV, radar point cloud CSV, and the
//! checkpoint container.

use anyhow::{bail, Context, Result};
use std::io::Write;
use std::path::Path;

use bevfuse_core::params::ParamStore;
use bevfuse_core::radar_stream::{RadarPoint, RadarPointCloud};
use bevfuse_core::tensor::Tensor;

/// Write a [H, W] map as binary PGM (P5), min-max normalized to 0..255.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    if map.rank() != 2 {
        bail!("PGM dump expects a rank-2 tensor, got {:?}", map.shape);
    }
    let (h, w) = (map.shape[0], map.shape[1]);
    let finite: Vec<f64> = map.data.iter().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(32 + h * w);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for &v in &map.data {
        let byte = if v.is_finite() { ((v - lo) / span * 255.0).round() as u8 } else { 0 };
        out.push(byte);
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Mean over channels of a [C, H, W] image, for grayscale dumps.
pub fn channel_mean(img: &Tensor) -> Tensor {
    let (c, h, w) = (img.shape[0], img.shape[1], img.shape[2]);
    let mut out = Tensor::zeros(&[h, w]);
    for ch in 0..c {
        for p in 0..h * w {
            out.data[p] += img.data[ch * h * w + p] / c as f64;
        }
    }
    out
}

/// Per-cell channel norm of a [Q, C] BEV feature as an [X, Y] map.
pub fn bev_norm_map(feature: &Tensor, x_cells: usize, y_cells: usize) -> Tensor {
    let c = feature.shape[1];
    let mut out = Tensor::zeros(&[x_cells, y_cells]);
    for q in 0..x_cells * y_cells {
        let row = &feature.data[q * c..(q + 1) * c];
        out.data[q] = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    out
}

/// Radar cloud as CSV rows (x,y,z,rcs,vx,vy,sweep).
pub fn write_radar_csv(path: &Path, cloud: &RadarPointCloud) -> Result<()> {
    let mut out = String::from("x,y,z,rcs,vx,vy,sweep\n");
    for p in &cloud.points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.pos[0], p.pos[1], p.pos[2], p.rcs, p.vel[0], p.vel[1], p.sweep
        ));
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_radar_csv(path: &Path) -> Result<RadarPointCloud> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading radar CSV {}", path.display()))?;
    let mut cloud = RadarPointCloud::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with('x')) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            bail!("radar CSV line {} has {} fields, want 7", i + 1, fields.len());
        }
        let f = |k: usize| -> Result<f64> {
            fields[k]
                .trim()
                .parse::<f64>()
                .with_context(|| format!("radar CSV line {} field {}", i + 1, k))
        };
        cloud.points.push(RadarPoint {
            pos: [f(0)?, f(1)?, f(2)?],
            rcs: f(3)?,
            vel: [f(4)?, f(5)?],
            sweep: f(6)? as u8,
        });
    }
    Ok(cloud)
}

/// Checkpoint container: magic "BEVC", u32 count, then per parameter a
/// length-prefixed name followed by its "BEVT" tensor blob.
pub fn write_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(b"BEVC");
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, tensor) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&tensor.encode());
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    if bytes.len() < 8 || &bytes[0..4] != b"BEVC" {
        bail!("not a checkpoint file: {}", path.display());
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut off = 8;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        if bytes.len() < off + 4 {
            bail!("truncated checkpoint");
        }
        let name_len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        let name = String::from_utf8(bytes[off..off + name_len].to_vec())?;
        off += name_len;
        let (tensor, used) =
            Tensor::decode(&bytes[off..]).map_err(|e| anyhow::anyhow!("{e}"))?;
        off += used;
        entries.push((name, tensor));
    }
    Ok(entries)
}

/// Deterministic CSV writer: plain `Display` of f64 is shortest-roundtrip
/// and byte-stable.
pub struct CsvWriter {
    buf: String,
}

impl CsvWriter {
    pub fn new() -> Self {
        CsvWriter { buf: String::new() }
    }

    pub fn comment(&mut self, text: &str) {
        self.buf.push_str("# ");
        self.buf.push_str(text);
        self.buf.push('\n');
    }

    pub fn row<I: IntoIterator<Item = String>>(&mut self, fields: I) {
        let mut first = true;
        for f in fields {
            if !first {
                self.buf.push(',');
            }
            self.buf.push_str(&f);
            first = false;
        }
        self.buf.push('\n');
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.buf)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn print(&self) {
        let mut stdout = std::io::stdout().lock();
        let _ = stdout.write_all(self.buf.as_bytes());
    }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}
