use std::collections::HashSet;

pub fn distinct(xs: &[u32]) -> Vec<u32> {
    let mut v: Vec<u32> = xs.iter().copied().collect::<HashSet<_>>().into_iter().collect();
    v.sort();
    v
}

pub fn count(xs: &[u32], v: u32) -> f64 {
    xs.iter().filter(|x| **x == v).count() as f64
}

pub fn both(a: &[u32], b: &[u32], va: u32, vb: u32) -> f64 {
    a.iter().zip(b).filter(|(x, y)| **x == va && **y == vb).count() as f64
}

pub fn entropy(xs: &[u32]) -> f64 {
    let n = xs.len() as f64;
    distinct(xs).iter().map(|&v| count(xs, v) / n).map(|p| -p * p.ln()).sum()
}

pub fn mutual_info(a: &[u32], b: &[u32]) -> f64 {
    let n = a.len() as f64;
    let mut out = 0.0;
    for &u in &distinct(a) {
        for &v in &distinct(b) {
            let j = both(a, b, u, v);
            if j > 0.0 {
                out += j / n * (j * n / (count(a, u) * count(b, v))).ln();
            }
        }
    }
    out
}

pub fn oracle_clustering(truth: &[u32], pred: &[u32]) -> (f64, f64, f64) {
    let n = truth.len() as f64;
    let purity = distinct(pred)
        .iter()
        .map(|&c| distinct(truth).iter().map(|&s| both(truth, pred, s, c)).fold(0.0, f64::max))
        .sum::<f64>()
        / n;
    let (hs, hc) = (entropy(truth), entropy(pred));
    let nmi = if hs + hc == 0.0 { 1.0 } else { mutual_info(truth, pred) / ((hs + hc) / 2.0) };
    let mut f = 0.0;
    for &s in &distinct(truth) {
        let mut best: f64 = 0.0;
        for &c in &distinct(pred) {
            let j = both(truth, pred, s, c);
            if j > 0.0 {
                let (p, r) = (j / count(pred, c), j / count(truth, s));
                best = best.max(2.0 * p * r / (p + r));
            }
        }
        f += count(truth, s) / n * best;
    }
    (purity, nmi, f)
}

pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Best one-to-one relabeling found by trying every permutation.
pub fn oracle_hamming(truth: &[u32], pred: &[u32]) -> f64 {
    let (ts, ps) = (distinct(truth), distinct(pred));
    let k = ts.len().max(ps.len());
    let mut best = 0.0;
    for perm in permutations(k) {
        let mut agree = 0.0;
        for (a, &p) in perm.iter().enumerate() {
            if a < ts.len() && p < ps.len() {
                agree += both(truth, pred, ts[a], ps[p]);
            }
        }
        best = f64::max(best, agree);
    }
    1.0 - best / truth.len() as f64
}

/// Per-position refinement errors, straight from the segment sets.
pub fn oracle_gce(a: &[u32], b: &[u32]) -> f64 {
    let n = a.len();
    let dir = |x: &[u32], y: &[u32]| -> f64 {
        (0..n)
            .map(|i| {
                let rx: Vec<usize> = (0..n).filter(|&j| x[j] == x[i]).collect();
                let missing = rx.iter().filter(|&&j| y[j] != y[i]).count();
                missing as f64 / rx.len() as f64
            })
            .sum()
    };
    dir(a, b).min(dir(b, a)) / n as f64
}
