//! Analytics report and topology export.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use selfheal::analytics::{report_csv, report_text};
use selfheal::bloom::{BloomParams, SecramLayout};
use selfheal::engine::derive_rng;
use selfheal::topology::{gen_mesh, gen_tree, Topology, DEFAULT_AREA_SIDE_M, DEFAULT_RANGE_M};

use crate::config::TopologyKind;

/// Report text; CSV files are also written to `csv_dir` when given.
pub fn analytics_report(csv_dir: Option<&Path>) -> Result<String> {
    let layout = SecramLayout::default();
    let params = BloomParams::default();
    let text = report_text(&layout, &params)?;
    if let Some(dir) = csv_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (stem, body) in report_csv(&layout, &params)? {
            let path = dir.join(format!("{stem}.csv"));
            fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(text)
}

/// The topology a run with this `seed` would use.
pub fn generate_topology(kind: TopologyKind, nodes: usize, seed: u64, side_m: Option<f64>, range_m: Option<f64>) -> Result<Topology> {
    Ok(match kind {
        TopologyKind::Mesh => {
            let side = side_m.unwrap_or_else(|| DEFAULT_AREA_SIDE_M * (nodes as f64 / 1024.0).sqrt());
            gen_mesh(nodes, side, range_m.unwrap_or(DEFAULT_RANGE_M), &mut derive_rng(seed, "topology", 0))?
        }
        TopologyKind::Btree => gen_tree(nodes, 2)?,
        TopologyKind::Ttree => gen_tree(nodes, 3)?,
    })
}

pub fn write_topology(t: &Topology, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    t.write_to(BufWriter::new(file)).with_context(|| format!("writing {}", out.display()))
}
