use crate::calibration::CalibrationStats;
use crate::error::{Error, Result};

/// Keeps the globally top `⌈keep_ratio · Σn⌉` entries of per-layer scores.
///
/// Equal scores are ranked by expert index, then layer, so ties spread
/// evenly across layers. A layer left with nothing keeps its own best entry;
/// the surplus this creates is taken back from the layer holding the most
/// survivors (lowest layer on ties), dropping its lowest-ranked survivor.
/// Returns the kept indices per layer, ascending.
pub fn global_keep(scores: &[Vec<f64>], keep_ratio: f64) -> Result<Vec<Vec<usize>>> {
    if scores.is_empty() || scores.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("statistics are empty".into()));
    }
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep ratio {keep_ratio} must be in (0, 1]"
        )));
    }
    let total: usize = scores.iter().map(Vec::len).sum();
    let budget = ((keep_ratio * total as f64) - 1e-9).ceil().max(1.0) as usize;

    let mut ranked: Vec<(usize, usize)> = scores
        .iter()
        .enumerate()
        .flat_map(|(l, s)| (0..s.len()).map(move |i| (l, i)))
        .collect();
    ranked.sort_by(|&(la, ia), &(lb, ib)| {
        scores[lb][ib]
            .total_cmp(&scores[la][ia])
            .then(ia.cmp(&ib))
            .then(la.cmp(&lb))
    });
    // each kept[l] is filled in rank order
    let mut kept: Vec<Vec<usize>> = vec![Vec::new(); scores.len()];
    for &(l, i) in &ranked[..budget.min(total)] {
        kept[l].push(i);
    }
    for (l, layer) in kept.iter_mut().enumerate() {
        if layer.is_empty() {
            let best = ranked.iter().find(|&&(rl, _)| rl == l).expect("layer nonempty").1;
            layer.push(best);
        }
    }
    let mut count: usize = kept.iter().map(Vec::len).sum();
    while count > budget {
        let Some(donor) = (0..kept.len())
            .filter(|&l| kept[l].len() > 1)
            .max_by(|&a, &b| kept[a].len().cmp(&kept[b].len()).then(b.cmp(&a)))
        else {
            break;
        };
        kept[donor].pop();
        count -= 1;
    }
    for layer in &mut kept {
        layer.sort_unstable();
    }
    Ok(kept)
}

/// Per-layer cluster counts from the globally most frequently selected
/// experts.
pub fn non_uniform_budgets(stats: &CalibrationStats, keep_ratio: f64) -> Result<Vec<usize>> {
    let scores: Vec<Vec<f64>> = stats
        .layers
        .iter()
        .map(|l| l.frequency.iter().map(|&f| f as f64).collect())
        .collect();
    Ok(global_keep(&scores, keep_ratio)?.iter().map(Vec::len).collect())
}
