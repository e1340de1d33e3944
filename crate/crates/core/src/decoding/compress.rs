use crate::error::{Error, Result};
use crate::model::Source;

#[derive(Clone, Debug, PartialEq)]
pub struct Compressed {
    pub source: Source,
    /// Predicted attention over the kept paragraphs.
    pub eta_hat: Vec<f64>,
    /// Storage indices of the kept paragraphs, ascending.
    pub kept: Vec<usize>,
}

/// Keeps the `s` paragraphs with the largest predicted attention, in their
/// original order, and renormalizes the prediction over them. Ties favour
/// the earlier paragraph. `s >= m` returns the input unchanged.
pub fn compress_source(source: &Source, eta_hat: &[f64], s: usize) -> Result<Compressed> {
    let m = source.len();
    if eta_hat.len() != m {
        return Err(Error::Contract(format!(
            "{} predictions for {m} paragraphs",
            eta_hat.len()
        )));
    }
    if s == 0 {
        return Err(Error::Config("compression must keep at least one paragraph".into()));
    }
    if s >= m {
        if s > m {
            log::warn!("compression size {s} exceeds the {m} available paragraphs; keeping all");
        }
        return Ok(Compressed {
            source: source.clone(),
            eta_hat: eta_hat.to_vec(),
            kept: (0..m).collect(),
        });
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eta_hat[b].total_cmp(&eta_hat[a]).then(a.cmp(&b)));
    let mut kept = order[..s].to_vec();
    kept.sort_unstable();
    let total: f64 = kept.iter().map(|&i| eta_hat[i]).sum();
    let eta = if total > 0.0 {
        kept.iter().map(|&i| eta_hat[i] / total).collect()
    } else {
        vec![1.0 / s as f64; s]
    };
    Ok(Compressed {
        source: source.select(&kept),
        eta_hat: eta,
        kept,
    })
}
