use serde::{Deserialize, Serialize};

use super::FeaturePanel;
use crate::error::{Error, Result};

pub const DEFAULT_CORR_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSelection {
    /// One representative per correlated group, in original column order.
    pub selected: Vec<String>,
    pub groups: Vec<Vec<String>>,
    /// Features dropped because their correlation is undefined.
    pub excluded: Vec<(String, String)>,
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    sxy / (sxx * syy).sqrt()
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut root = i;
    while parent[root] != root {
        root = parent[root];
    }
    let mut cur = i;
    while parent[cur] != root {
        let next = parent[cur];
        parent[cur] = root;
        cur = next;
    }
    root
}

/// Groups features whose |Pearson correlation| reaches `corr_threshold`
/// (transitively) and keeps the lowest-index member of each group.
pub fn select_features(fp: &FeaturePanel, corr_threshold: f64) -> Result<FeatureSelection> {
    if !(corr_threshold > 0.0 && corr_threshold <= 1.0) {
        return Err(Error::invalid("correlation threshold must be in (0, 1]"));
    }
    let samples = fp.base().n_times() * fp.base().n_assets();
    if samples < 2 {
        return Err(Error::InsufficientData("feature selection needs at least 2 samples".into()));
    }
    let names = fp.feature_names();
    let columns: Vec<Vec<f64>> = (0..names.len()).map(|i| fp.column(i)).collect();

    let mut excluded = Vec::new();
    let mut live = Vec::new();
    for (i, col) in columns.iter().enumerate() {
        let first = col[0];
        if col.iter().all(|&v| v == first) {
            log::warn!("feature `{}` has zero variance; excluded", names[i]);
            excluded.push((names[i].clone(), "zero variance".to_string()));
        } else {
            live.push(i);
        }
    }

    let mut parent: Vec<usize> = (0..names.len()).collect();
    for (a, &i) in live.iter().enumerate() {
        for &j in &live[a + 1..] {
            if pearson(&columns[i], &columns[j]).abs() >= corr_threshold {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                // keep the smaller index as the root so it becomes the representative
                let (lo, hi) = if ri < rj { (ri, rj) } else { (rj, ri) };
                parent[hi] = lo;
            }
        }
    }

    let mut groups: Vec<Vec<String>> = Vec::new();
    let mut selected = Vec::new();
    let mut root_group: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    for &i in &live {
        let r = find(&mut parent, i);
        match root_group.get(&r) {
            Some(&g) => groups[g].push(names[i].clone()),
            None => {
                root_group.insert(r, groups.len());
                groups.push(vec![names[i].clone()]);
                selected.push(names[i].clone());
            }
        }
    }
    Ok(FeatureSelection {
        selected,
        groups,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marketdata::{PanelData, Timestamp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn panel(cols: &[(&str, Vec<f64>)]) -> FeaturePanel {
        let t = cols[0].1.len();
        let base = PanelData::from_closes(
            (0..t).map(|i| Timestamp(i as i64)).collect(),
            vec!["A".into()],
            &vec![vec![1.0]; t],
        )
        .unwrap();
        let values = (0..t).flat_map(|r| cols.iter().map(move |c| c.1[r])).collect();
        FeaturePanel::new(base, cols.iter().map(|c| c.0.to_string()).collect(), values).unwrap()
    }

    fn noise(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random::<f64>() - 0.5).collect()
    }

    #[test]
    fn identical_columns_collapse() {
        let x = noise(1, 50);
        let sel = select_features(&panel(&[("a", x.clone()), ("b", x)]), 0.95).unwrap();
        assert_eq!(sel.selected, vec!["a"]);
        assert_eq!(sel.groups, vec![vec!["a".to_string(), "b".to_string()]]);
    }

    #[test]
    fn affine_transform_grouped() {
        let x = noise(2, 50);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let sel = select_features(&panel(&[("x", x), ("y", y), ("neg", neg)]), 0.95).unwrap();
        assert_eq!(sel.selected, vec!["x"]);
    }

    #[test]
    fn independent_noise_kept() {
        // fixed 100-sample pair; the correlation is recomputed here as the oracle
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
        let rho = pearson(&a, &b);
        assert!(rho.abs() < 0.95, "rho = {rho}");
        let sel = select_features(&panel(&[("a", a), ("b", b)]), 0.95).unwrap();
        assert_eq!(sel.selected, vec!["a", "b"]);
    }

    #[test]
    fn transitive_closure() {
        let x = noise(3, 200);
        let e = noise(4, 200);
        // x~y and y~z above 0.9 while x~z might not be; all land in one group
        let y: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a + 0.3 * b).collect();
        let z: Vec<f64> = y.iter().zip(&e).map(|(a, b)| a + 0.3 * b).collect();
        let sel = select_features(&panel(&[("x", x), ("y", y), ("z", z)]), 0.9).unwrap();
        assert_eq!(sel.selected.len(), 1);
    }

    #[test]
    fn zero_variance_excluded() {
        let sel = select_features(&panel(&[("c", vec![1.0; 10]), ("x", noise(5, 10))]), 0.95).unwrap();
        assert_eq!(sel.selected, vec!["x"]);
        assert_eq!(sel.excluded[0].0, "c");
    }

    #[test]
    fn duplicating_grouped_feature_is_invariant() {
        let x = noise(6, 40);
        let y = noise(7, 40);
        let base = select_features(&panel(&[("x", x.clone()), ("y", y.clone())]), 0.95).unwrap();
        let dup = select_features(&panel(&[("x", x.clone()), ("y", y), ("x2", x)]), 0.95).unwrap();
        assert_eq!(base.selected, dup.selected);
    }
}
