//! Optional CSV dump of generated received grids.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::ResourceGrid;
use crate::error::Result;
use crate::provenance_line;

/// Writes `(sample_id, t, f, rx, re_y, im_y)` rows to `path` and a
/// `<path>.meta` sidecar listing the seed, config hash and per-sample N0.
pub fn write_dataset_csv(
    path: &Path,
    samples: &[(u64, &ResourceGrid)],
    seed: u64,
    config_hash: &str,
) -> Result<PathBuf> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", provenance_line(config_hash, seed))?;
    writeln!(w, "sample_id,t,f,rx,re_y,im_y")?;
    for (id, g) in samples {
        for t in 0..g.num_symbols {
            for f in 0..g.num_subcarriers {
                for r in 0..g.num_rx {
                    let y = g.y_at(t, f, r);
                    writeln!(w, "{id},{t},{f},{r},{:e},{:e}", y.re, y.im)?;
                }
            }
        }
    }
    w.flush()?;

    let mut meta_path = path.as_os_str().to_owned();
    meta_path.push(".meta");
    let meta_path = PathBuf::from(meta_path);
    let mut m = BufWriter::new(File::create(&meta_path)?);
    writeln!(m, "{}", provenance_line(config_hash, seed))?;
    writeln!(m, "seed={seed}")?;
    writeln!(m, "config_hash={config_hash}")?;
    for (id, g) in samples {
        writeln!(m, "n0[{id}]={:e}", g.n0)?;
    }
    m.flush()?;
    Ok(meta_path)
}
