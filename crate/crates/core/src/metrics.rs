use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::LabelMask;

/// Dice overlap `2|P ∩ G| / (|P| + |G|)` of two voxel sets given as
/// membership flags. Two empty sets agree perfectly.
pub fn dsc(pred: &[bool], gt: &[bool]) -> f64 {
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}

/// Dice of every class `0..C` between two masks of equal shape.
pub fn dice_per_class(pred: &LabelMask, gt: &LabelMask) -> Result<Vec<f64>> {
    if pred.dims() != gt.dims() || pred.classes() != gt.classes() {
        return Err(Error::shape(
            "dice (mask shapes)",
            &[pred.dims().as_slice(), &[pred.classes()]].concat(),
            &[gt.dims().as_slice(), &[gt.classes()]].concat(),
        ));
    }
    let classes = pred.classes();
    let mut p = vec![0usize; classes];
    let mut g = vec![0usize; classes];
    let mut both = vec![0usize; classes];
    for (&a, &b) in pred.labels().iter().zip(gt.labels()) {
        p[a as usize] += 1;
        g[b as usize] += 1;
        if a == b {
            both[a as usize] += 1;
        }
    }
    Ok((0..classes)
        .map(|c| {
            if p[c] + g[c] == 0 {
                1.0
            } else {
                2.0 * both[c] as f64 / (p[c] + g[c]) as f64
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population statistics; an empty sample gives zeros.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Per-class Dice at each click count, aggregated over cases.
///
/// A case that converges before `K` clicks keeps its last mask for the
/// remaining counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: usize,
    pub max_clicks: usize,
    pub cases: usize,
    /// `per_case[case][clicks][class]`.
    pub per_case: Vec<Vec<Vec<f64>>>,
    /// `summary[clicks][class]`.
    pub summary: Vec<Vec<MeanStd>>,
}

impl MetricsReport {
    pub fn from_cases(classes: usize, max_clicks: usize, per_case: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        for case in &per_case {
            if case.len() != max_clicks + 1 || case.iter().any(|row| row.len() != classes) {
                return Err(Error::Contract("per-case Dice table has the wrong shape".into()));
            }
        }
        let summary = (0..=max_clicks)
            .map(|k| {
                (0..classes)
                    .map(|c| MeanStd::of(&per_case.iter().map(|case| case[k][c]).collect::<Vec<_>>()))
                    .collect()
            })
            .collect();
        Ok(Self {
            classes,
            max_clicks,
            cases: per_case.len(),
            per_case,
            summary,
        })
    }

    pub fn mean(&self, clicks: usize, class: usize) -> f64 {
        self.summary[clicks][class].mean
    }

    /// Mean over the foreground classes `1..C`.
    pub fn foreground_mean(&self, clicks: usize) -> f64 {
        let fg = &self.summary[clicks][1..];
        fg.iter().map(|s| s.mean).sum::<f64>() / fg.len() as f64
    }

    /// Whitespace-aligned `click_count class mean std` table.
    pub fn table(&self) -> String {
        let mut out = String::from("click_count\tclass\tmean\tstd\n");
        for (k, row) in self.summary.iter().enumerate() {
            for (c, s) in row.iter().enumerate() {
                out.push_str(&format!("{k}\t{c}\t{:.6}\t{:.6}\n", s.mean, s.std));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_values() {
        let a = [true, true, false, false];
        assert_eq!(dsc(&a, &a), 1.0);
        assert_eq!(dsc(&a, &[false, false, true, true]), 0.0);
        assert_eq!(dsc(&[false; 4], &[false; 4]), 1.0);
        // |P| = 2, |G| = 3, overlap 1
        let p = [true, true, false, false, false];
        let g = [false, true, true, true, false];
        assert!((dsc(&p, &g) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn per_class_matches_binary() {
        let dims = [2, 2, 2];
        let p = LabelMask::new(dims, 3, vec![0, 1, 1, 2, 2, 0, 1, 0]).unwrap();
        let g = LabelMask::new(dims, 3, vec![0, 1, 2, 2, 0, 0, 1, 1]).unwrap();
        let d = dice_per_class(&p, &g).unwrap();
        for c in 0..3u8 {
            assert_eq!(d[c as usize], dsc(&p.region(c), &g.region(c)));
        }
        let other = LabelMask::filled([2, 2, 4], 3, 0).unwrap();
        assert!(dice_per_class(&p, &other).is_err());
    }

    #[test]
    fn report_aggregates() {
        let cases = vec![vec![vec![1.0, 0.5], vec![1.0, 0.7]], vec![vec![1.0, 0.3], vec![1.0, 0.9]]];
        let r = MetricsReport::from_cases(2, 1, cases).unwrap();
        assert!((r.mean(0, 1) - 0.4).abs() < 1e-12);
        assert!((r.summary[0][1].std - 0.1).abs() < 1e-12);
        assert!((r.foreground_mean(1) - 0.8).abs() < 1e-12);
        assert!(r.table().starts_with("click_count\tclass\tmean\tstd\n0\t0\t1.000000"));
        assert!(MetricsReport::from_cases(2, 2, vec![vec![vec![1.0, 1.0]]]).is_err());
    }

    fn counting_oracle(p: &[bool], g: &[bool]) -> f64 {
        let inter = (0..p.len()).filter(|&i| p[i] && g[i]).count();
        let np = p.iter().filter(|&&b| b).count();
        let ng = g.iter().filter(|&&b| b).count();
        if np + ng == 0 {
            1.0
        } else {
            (2 * inter) as f64 / (np + ng) as f64
        }
    }

    proptest! {
        #[test]
        fn matches_counting_and_is_symmetric(pairs in prop::collection::vec(any::<(bool, bool)>(), 1..200)) {
            let (p, g): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
            let d = dsc(&p, &g);
            prop_assert_eq!(d, counting_oracle(&p, &g));
            prop_assert_eq!(d, dsc(&g, &p));
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
