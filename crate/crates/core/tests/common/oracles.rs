//! Direct nested-loop evaluations, written without the library's graph or kernels.

pub type Rows = Vec<Vec<f64>>;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// -(1/N) sum_i log( exp(s_ii/t) / (sum_k exp(s_ik/t) + sum_m exp(s'_im/t)) )
pub fn contrast(anchor: &Rows, pos: &Rows, neg: &Rows, scale: f64) -> f64 {
    let n = anchor.len();
    let mut total = 0.0;
    for i in 0..n {
        let num = (dot(&anchor[i], &pos[i]) * scale).exp();
        let mut den = 0.0;
        for p in pos {
            den += (dot(&anchor[i], p) * scale).exp();
        }
        for q in neg {
            den += (dot(&anchor[i], q) * scale).exp();
        }
        total -= (num / den).ln();
    }
    total / n as f64
}

pub fn infonce(anchor: &Rows, cands: &Rows, scale: f64) -> f64 {
    contrast(anchor, cands, &vec![], scale)
}

pub fn clip(img: &Rows, txt: &Rows, scale: f64) -> f64 {
    infonce(img, txt, scale) + infonce(txt, img, scale)
}

pub fn negclip(img: &Rows, txt: &Rows, txt_neg: &Rows, scale: f64) -> f64 {
    infonce(txt, img, scale) + contrast(img, txt, txt_neg, scale)
}

pub fn tripletclip(img: &Rows, txt: &Rows, img_neg: &Rows, txt_neg: &Rows, scale: f64) -> f64 {
    negclip(img, txt, txt_neg, scale) + negclip(img_neg, txt_neg, txt, scale)
}

pub fn negimage(img: &Rows, txt: &Rows, img_neg: &Rows, scale: f64) -> f64 {
    infonce(img, txt, scale) + contrast(txt, img, img_neg, scale)
}

/// (text, image, group) hit counts by direct rule evaluation.
pub fn winoground(x: &Rows, y: &Rows, xn: &Rows, yn: &Rows) -> (usize, usize, usize) {
    let (mut t, mut i, mut g) = (0, 0, 0);
    for k in 0..x.len() {
        let a = dot(&x[k], &y[k]);
        let b = dot(&x[k], &yn[k]);
        let c = dot(&xn[k], &y[k]);
        let d = dot(&xn[k], &yn[k]);
        let text = a > b && d > c;
        let image = a > c && d > b;
        if text {
            t += 1;
        }
        if image {
            i += 1;
        }
        if text && image {
            g += 1;
        }
    }
    (t, i, g)
}

/// Rank of `target` after fully sorting candidates by (descending sim, ascending index).
pub fn sorted_rank(sims: &[f64], target: usize) -> usize {
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    idx.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b)));
    idx.iter().position(|&i| i == target).unwrap()
}

pub fn recall_at(img: &Rows, txt: &Rows, k: usize) -> (f64, f64) {
    let n = img.len();
    let (mut i2t, mut t2i) = (0, 0);
    for q in 0..n {
        let row: Vec<f64> = txt.iter().map(|t| dot(&img[q], t)).collect();
        if sorted_rank(&row, q) < k {
            i2t += 1;
        }
        let col: Vec<f64> = img.iter().map(|im| dot(im, &txt[q])).collect();
        if sorted_rank(&col, q) < k {
            t2i += 1;
        }
    }
    (i2t as f64 / n as f64, t2i as f64 / n as f64)
}

/// Top-k hits where any other class scoring at least the true one counts against it.
pub fn topk_hits(img: &Rows, classes: &Rows, labels: &[usize], k: usize) -> usize {
    let mut hits = 0;
    for (i, &label) in labels.iter().enumerate() {
        let truth = dot(&img[i], &classes[label]);
        let mut ahead = 0;
        for (c, cls) in classes.iter().enumerate() {
            if c != label && dot(&img[i], cls) >= truth {
                ahead += 1;
            }
        }
        if ahead < k {
            hits += 1;
        }
    }
    hits
}
