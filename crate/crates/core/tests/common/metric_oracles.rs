use std::collections::BTreeSet;

/// ARI by explicit pair counting over all unordered pixel pairs.
pub fn ari_pairs(pred: &[u8], gt: &[u8]) -> f64 {
    let n = pred.len();
    let (mut both, mut same_p, mut same_g) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let p = pred[i] == pred[j];
            let g = gt[i] == gt[j];
            same_p += p as u8 as f64;
            same_g += g as u8 as f64;
            both += (p && g) as u8 as f64;
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let expected = same_p * same_g / pairs;
    let max = (same_p + same_g) / 2.0;
    if max == expected {
        let mut map = std::collections::BTreeMap::new();
        let mut inv = std::collections::BTreeMap::new();
        let identical = pred.iter().zip(gt).all(|(p, g)| {
            *map.entry(*p).or_insert(*g) == *g && *inv.entry(*g).or_insert(*p) == *p
        });
        return if identical { 1.0 } else { 0.0 };
    }
    (both - expected) / (max - expected)
}

pub fn permutations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for (i, &x) in items.iter().enumerate() {
        let mut rest = items.to_vec();
        rest.remove(i);
        for mut tail in permutations(&rest, k - 1) {
            tail.insert(0, x);
            out.push(tail);
        }
    }
    out
}

/// Mean IoU by enumerating every injective assignment of gt classes to
/// predicted labels (unmatched classes score zero).
pub fn miou_brute(pred: &[u8], gt: &[u8], fg: bool) -> Option<f64> {
    let classes: Vec<u8> = gt
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|&g| !fg || g != 0)
        .collect();
    if classes.is_empty() {
        return None;
    }
    let labels: Vec<u8> = pred.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let iou = |g: u8, p: u8| {
        let i = pred.iter().zip(gt).filter(|&(&a, &b)| a == p && b == g).count() as f64;
        let u = pred.iter().zip(gt).filter(|&(&a, &b)| a == p || b == g).count() as f64;
        i / u
    };
    let table: std::collections::BTreeMap<(u8, usize), f64> = classes
        .iter()
        .flat_map(|&g| labels.iter().enumerate().map(move |(j, &p)| ((g, j), p)))
        .map(|(k, p)| (k, iou(k.0, p)))
        .collect();
    // Pad with "unmatched" markers so every class can also go unmatched.
    let slots: Vec<usize> = (0..labels.len() + classes.len()).collect();
    let mut best = 0.0f64;
    for perm in permutations(&slots, classes.len()) {
        let total: f64 = classes
            .iter()
            .zip(&perm)
            .map(|(&g, &j)| if j < labels.len() { table[&(g, j)] } else { 0.0 })
            .sum();
        best = best.max(total);
    }
    Some(best / classes.len() as f64)
}
