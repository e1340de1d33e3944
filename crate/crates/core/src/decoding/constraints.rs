use crate::vocab::{COMMA, EOS};

/// Repetition rules applied to next-token scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Constraints {
    /// Forbid any token that would repeat a trigram already in the history.
    pub block_trigrams: bool,
    /// Forbid the last `window` tokens of the history (comma excepted).
    pub window: usize,
}

impl Constraints {
    pub const NONE: Self = Self {
        block_trigrams: false,
        window: 0,
    };
}

impl Default for Constraints {
    fn default() -> Self {
        Self {
            block_trigrams: true,
            window: 2,
        }
    }
}

/// Sets the log-probability of every forbidden next token to `-inf`.
/// The end marker is never blocked.
pub fn apply_constraints(history: &[usize], log_probs: &mut [f64], rules: Constraints) {
    let mut block = |t: usize| {
        if t != EOS {
            if let Some(v) = log_probs.get_mut(t) {
                *v = f64::NEG_INFINITY;
            }
        }
    };
    let n = history.len();
    if rules.block_trigrams && n >= 2 {
        let (a, b) = (history[n - 2], history[n - 1]);
        for w in history.windows(3) {
            if w[0] == a && w[1] == b {
                block(w[2]);
            }
        }
    }
    for &t in history.iter().rev().take(rules.window) {
        if t != COMMA {
            block(t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeated_trigram_is_blocked() {
        let (a, b, c) = (5, 6, 7);
        let mut lp = vec![0.0; 10];
        apply_constraints(
            &[a, b, c, a, b],
            &mut lp,
            Constraints {
                block_trigrams: true,
                window: 0,
            },
        );
        assert_eq!(lp[c], f64::NEG_INFINITY);
        assert_eq!(lp.iter().filter(|v| v.is_infinite()).count(), 1);
    }

    #[test]
    fn window_blocks_recent_tokens_except_comma() {
        let mut lp = vec![0.0; 10];
        apply_constraints(&[8, 9], &mut lp, Constraints::default());
        assert!(lp[8].is_infinite() && lp[9].is_infinite());
        let mut lp = vec![0.0; 10];
        apply_constraints(&[5, COMMA, 6], &mut lp, Constraints::default());
        assert!(lp[COMMA].is_finite());
        assert!(lp[6].is_infinite());
        assert!(lp[5].is_finite(), "outside the two-token window");
    }

    #[test]
    fn end_marker_is_exempt() {
        let mut lp = vec![0.0; 10];
        apply_constraints(&[EOS, 5, EOS, 5], &mut lp, Constraints::default());
        assert!(lp[EOS].is_finite());
    }
}
