use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetSplit, AU_NAMES, NUM_AUS, NUM_EXPRESSIONS};
use crate::error::{Error, Result};

/// Per-label counts used for imbalance analysis and positive weights.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceStats {
    pub au_positive_counts: [u64; NUM_AUS],
    pub au_negative_counts: [u64; NUM_AUS],
    pub expr_counts: [u64; NUM_EXPRESSIONS],
}

impl BalanceStats {
    pub fn au_frames(&self) -> u64 {
        self.au_positive_counts[0] + self.au_negative_counts[0]
    }

    pub fn expr_frames(&self) -> u64 {
        self.expr_counts.iter().sum()
    }
}

pub fn compute_balance_stats(split: &DatasetSplit) -> BalanceStats {
    let mut s = BalanceStats::default();
    for a in &split.annotations {
        if let Some(au) = &a.au {
            for (i, &v) in au.iter().enumerate() {
                if v == 1 {
                    s.au_positive_counts[i] += 1;
                } else {
                    s.au_negative_counts[i] += 1;
                }
            }
        }
        if let Some(e) = a.expr {
            s.expr_counts[e as usize] += 1;
        }
    }
    s
}

/// `w_i = clamp(negative_i / max(positive_i, 1), 1, w_max)`.
pub fn positive_weights(stats: &BalanceStats, w_max: f64) -> Result<[f64; NUM_AUS]> {
    if !(w_max >= 1.0) {
        return Err(Error::contract(format!("w_max must be >= 1, got {w_max}")));
    }
    let mut w = [1.0; NUM_AUS];
    for (i, slot) in w.iter_mut().enumerate() {
        let pos = stats.au_positive_counts[i].max(1) as f64;
        *slot = (stats.au_negative_counts[i] as f64 / pos).clamp(1.0, w_max);
    }
    Ok(w)
}

/// Writes `label,positive,negative` for the AUs and `class,count` for expressions.
pub fn write_stats_csv(stats: &BalanceStats, au_path: &Path, expr_path: &Path) -> Result<()> {
    let mut au = String::from("label,positive,negative\n");
    for (i, name) in AU_NAMES.iter().enumerate() {
        writeln!(
            au,
            "{name},{},{}",
            stats.au_positive_counts[i], stats.au_negative_counts[i]
        )
        .unwrap();
    }
    std::fs::write(au_path, au).map_err(|e| Error::io(au_path, e))?;
    let mut ex = String::from("class,count\n");
    for (c, n) in stats.expr_counts.iter().enumerate() {
        writeln!(ex, "{c},{n}").unwrap();
    }
    std::fs::write(expr_path, ex).map_err(|e| Error::io(expr_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FrameAnnotation;

    fn ann(au: Option<[u8; NUM_AUS]>, expr: Option<u8>) -> FrameAnnotation {
        FrameAnnotation {
            video_id: "v".into(),
            frame_index: 0,
            au,
            expr,
        }
    }

    #[test]
    fn empty_split_is_all_zero() {
        assert_eq!(
            compute_balance_stats(&DatasetSplit::new("e")),
            BalanceStats::default()
        );
    }

    #[test]
    fn hand_counts() {
        let mut s = DatasetSplit::new("s");
        let mut a = [0u8; NUM_AUS];
        a[0] = 1;
        let mut b = a;
        b[1] = 1;
        s.annotations.push(ann(Some(a), Some(0)));
        s.annotations.push(ann(Some(b), Some(0)));
        s.annotations.push(ann(None, Some(3)));
        let st = compute_balance_stats(&s);
        let mut pos = [0u64; NUM_AUS];
        pos[0] = 2;
        pos[1] = 1;
        assert_eq!(st.au_positive_counts, pos);
        assert_eq!(st.expr_counts, [2, 0, 0, 1, 0, 0, 0]);
        for i in 0..NUM_AUS {
            assert_eq!(st.au_positive_counts[i] + st.au_negative_counts[i], 2);
        }
    }

    #[test]
    fn weights() {
        let mut st = BalanceStats::default();
        st.au_positive_counts = [5; NUM_AUS];
        st.au_negative_counts = [5; NUM_AUS];
        assert_eq!(positive_weights(&st, 20.0).unwrap(), [1.0; NUM_AUS]);
        st.au_positive_counts[0] = 10;
        st.au_negative_counts[0] = 90;
        st.au_positive_counts[1] = 1;
        st.au_negative_counts[1] = 1000;
        st.au_positive_counts[2] = 0;
        st.au_negative_counts[2] = 3;
        let w = positive_weights(&st, 20.0).unwrap();
        assert_eq!(w[0], 9.0);
        assert_eq!(w[1], 20.0);
        assert_eq!(w[2], 3.0);
        assert!(positive_weights(&st, 0.5).is_err());
    }
}
