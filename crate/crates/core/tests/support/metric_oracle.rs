//! Brute-force BLEU and NIST used as test oracles: every count is a linear
//! scan over explicit n-gram lists, with no hashing or shared code paths.

fn grams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for start in 0..=tokens.len() - n {
        out.push(tokens[start..start + n].to_vec());
    }
    out
}

fn occurrences(list: &[Vec<String>], gram: &[String]) -> usize {
    list.iter().filter(|g| g.as_slice() == gram).count()
}

fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

pub fn bleu(hyps: &[Vec<String>], refs: &[Vec<String>], max_n: usize) -> f64 {
    let hyp_len: usize = hyps.iter().map(|h| h.len()).sum();
    let ref_len: usize = refs.iter().map(|r| r.len()).sum();
    if hyp_len == 0 {
        return 0.0;
    }
    let mut precisions = Vec::new();
    for n in 1..=max_n {
        let (mut m, mut t) = (0usize, 0usize);
        for (h, r) in hyps.iter().zip(refs) {
            let hg = grams(h, n);
            let rg = grams(r, n);
            t += hg.len();
            for g in distinct(&hg) {
                m += occurrences(&hg, &g).min(occurrences(&rg, &g));
            }
        }
        if t > 0 {
            precisions.push(m as f64 / t as f64);
        }
    }
    if precisions.contains(&0.0) {
        return 0.0;
    }
    let geo = precisions.iter().map(|p| p.ln()).sum::<f64>() / precisions.len() as f64;
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    100.0 * bp * geo.exp()
}

pub fn nist(hyps: &[Vec<String>], refs: &[Vec<String>], max_n: usize) -> f64 {
    let hyp_len: usize = hyps.iter().map(|h| h.len()).sum();
    let ref_len: usize = refs.iter().map(|r| r.len()).sum();
    if hyp_len == 0 || ref_len == 0 {
        return 0.0;
    }
    let ref_count = |gram: &[String]| -> usize { refs.iter().map(|r| occurrences(&grams(r, gram.len()), gram)).sum() };
    let info = |gram: &[String]| -> f64 {
        let prefix = if gram.len() == 1 { ref_len } else { ref_count(&gram[..gram.len() - 1]) };
        (prefix as f64 / ref_count(gram) as f64).log2()
    };
    let mut score = 0.0;
    for n in 1..=max_n {
        let mut sum = 0.0;
        let mut t = 0usize;
        for (h, r) in hyps.iter().zip(refs) {
            let hg = grams(h, n);
            let rg = grams(r, n);
            t += hg.len();
            for g in distinct(&hg) {
                let m = occurrences(&hg, &g).min(occurrences(&rg, &g));
                if m > 0 {
                    sum += m as f64 * info(&g);
                }
            }
        }
        if t > 0 {
            score += sum / t as f64;
        }
    }
    let ratio = (hyp_len as f64 / ref_len as f64).min(1.0);
    let beta = 0.5f64.ln() / (1.5f64.ln() * 1.5f64.ln());
    score * (beta * ratio.ln() * ratio.ln()).exp()
}
