//! Human-readable report bundle: subset-size table, per-subset perplexity
//! histograms on shared log-spaced axes, a pairwise distribution-distance
//! matrix, and a plain-SVG overlay plot (simple path elements, no plotting
//! dependency).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::manifest::write_json_atomic;
use crate::perplexity::{distribution_distance, histogram, Histogram, PplRecord};
use crate::selector::Partition;
use crate::Scalar;

pub const DEFAULT_BINS: usize = 40;
/// The overlay plot shows at most this many subsets.
pub const MAX_OVERLAY_SUBSETS: usize = 6;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub sizes: BTreeMap<String, usize>,
    /// Pairwise 1-Wasserstein distances between subset histograms.
    pub distance_matrix: BTreeMap<String, BTreeMap<String, Scalar>>,
    /// The alignment figures of interest: how closely the selected subsets
    /// track their parent distributions. Reported, not asserted — the
    /// relationship is model-dependent.
    pub alignment: BTreeMap<String, Scalar>,
    pub notices: Vec<String>,
}

/// The subsets reported on, in display order.
fn subsets(partition: &Partition) -> Vec<(&'static str, Vec<String>)> {
    vec![
        ("pk", partition.pk.clone()),
        ("wk", partition.wk.clone()),
        ("icl_c", partition.icl_c.clone()),
        ("icl_ic", partition.icl_ic.clone()),
        ("w2c", partition.w2c.clone()),
        ("ww", partition.ww.clone()),
    ]
}

pub struct ReportOutput {
    pub bundle: ReportBundle,
    pub histograms: BTreeMap<String, Histogram<Scalar>>,
    pub svg: Option<String>,
}

pub fn build_report(
    partition: &Partition,
    ppl: Option<&[PplRecord]>,
    bins: usize,
) -> Result<ReportOutput, Error> {
    let mut bundle = ReportBundle::default();
    for (name, ids) in subsets(partition) {
        bundle.sizes.insert(name.to_string(), ids.len());
    }
    bundle
        .sizes
        .insert("quarantine".to_string(), partition.quarantine.len());
    bundle.sizes.insert(
        "total".to_string(),
        partition.pk.len() + partition.wk.len() + partition.quarantine.len(),
    );

    let mut histograms = BTreeMap::new();
    let mut svg = None;
    match ppl {
        None => bundle
            .notices
            .push("perplexity records unavailable; histogram and distance sections omitted".into()),
        Some([]) => bundle
            .notices
            .push("perplexity records empty; histogram and distance sections omitted".into()),
        Some(records) => {
            for (name, ids) in subsets(partition) {
                if ids.is_empty() {
                    continue;
                }
                let id_set: BTreeSet<String> = ids.into_iter().collect();
                match histogram(records, &id_set, bins, name) {
                    Ok(h) => {
                        histograms.insert(name.to_string(), h);
                    }
                    Err(e) => bundle.notices.push(format!("{name}: {e}")),
                }
            }
            for (a, ha) in &histograms {
                for (b, hb) in &histograms {
                    let d = distribution_distance(ha, hb)?;
                    bundle
                        .distance_matrix
                        .entry(a.clone())
                        .or_default()
                        .insert(b.clone(), d);
                }
            }
            for (selected, parent) in [("icl_c", "pk"), ("w2c", "wk"), ("ww", "wk")] {
                if let (Some(hs), Some(hp)) = (histograms.get(selected), histograms.get(parent)) {
                    bundle.alignment.insert(
                        format!("{selected}~{parent}"),
                        distribution_distance(hs, hp)?,
                    );
                }
            }
            if !histograms.is_empty() {
                svg = Some(render_overlay_svg(&histograms));
            }
        }
    }

    Ok(ReportOutput {
        bundle,
        histograms,
        svg,
    })
}

/// Write report.json, histograms.json, and overlay.svg under `dir`.
pub fn write_report(output: &ReportOutput, dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    write_json_atomic(&dir.join("report.json"), &output.bundle)?;
    if !output.histograms.is_empty() {
        write_json_atomic(&dir.join("histograms.json"), &output.histograms)?;
    }
    if let Some(svg) = &output.svg {
        crate::manifest::write_atomic(&dir.join("overlay.svg"), svg.as_bytes())?;
    }
    Ok(())
}

/// Plain text size table for the console.
pub fn size_table(bundle: &ReportBundle) -> String {
    let mut out = String::from("subset      size\n");
    for name in ["total", "pk", "wk", "icl_c", "icl_ic", "w2c", "ww", "quarantine"] {
        if let Some(size) = bundle.sizes.get(name) {
            out.push_str(&format!("{name:<10} {size:>6}\n"));
        }
    }
    out
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
];

/// Frequency polylines over shared bins, one path per subset, with a legend.
/// Heights are normalized per subset so shapes are comparable.
fn render_overlay_svg(histograms: &BTreeMap<String, Histogram<Scalar>>) -> String {
    let (width, height, margin) = (720.0, 420.0, 50.0);
    let plot_w = width - 2.0 * margin;
    let plot_h = height - 2.0 * margin;

    let shown: Vec<(&String, &Histogram<Scalar>)> =
        histograms.iter().take(MAX_OVERLAY_SUBSETS).collect();
    let peak = shown
        .iter()
        .flat_map(|(_, h)| h.normalized())
        .fold(0.0_f64, f64::max)
        .max(1e-12);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width} {height}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    // axes
    svg.push_str(&format!(
        "  <path d=\"M {m} {m} L {m} {b} L {r} {b}\" stroke=\"black\" fill=\"none\"/>\n",
        m = margin,
        b = height - margin,
        r = width - margin,
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">perplexity (log-spaced bins)</text>\n",
        width / 2.0,
        height - margin / 3.0
    ));

    for (i, (name, hist)) in shown.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let fracs = hist.normalized();
        let n = fracs.len();
        let mut d = String::new();
        for (k, f) in fracs.iter().enumerate() {
            let x = margin + plot_w * (k as f64 + 0.5) / n as f64;
            let y = height - margin - plot_h * (f / peak);
            d.push_str(&format!("{}{x:.2} {y:.2} ", if k == 0 { "M " } else { "L " }));
        }
        svg.push_str(&format!(
            "  <path d=\"{}\" stroke=\"{color}\" stroke-width=\"1.5\" fill=\"none\"/>\n",
            d.trim_end()
        ));
        let legend_y = margin + 16.0 * i as f64;
        svg.push_str(&format!(
            "  <rect x=\"{x}\" y=\"{y}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n",
            x = width - margin - 110.0,
            y = legend_y,
        ));
        svg.push_str(&format!(
            "  <text x=\"{x}\" y=\"{y}\">{name} (n={total})</text>\n",
            x = width - margin - 92.0,
            y = legend_y + 10.0,
            total = hist.total,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
