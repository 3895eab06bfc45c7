//! Brute-force counting oracles for the multi-label metrics.

use std::collections::BTreeSet;

use dlfl::metrics::{
    average_precision, evaluate, instance_metrics, macro_micro, mean_accuracy, topk_binarize, MacroMicro,
    PredictionSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-9;

fn div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

fn hmean(p: f64, r: f64) -> f64 {
    div(2.0 * p * r, p + r)
}

/// Whether sample `l` is ranked ahead of sample `i`: higher score, or equal
/// score and earlier position.
fn ahead(scores: &[f64], l: usize, i: usize) -> bool {
    scores[l] > scores[i] || (scores[l] == scores[i] && l < i)
}

/// Mean over positives of precision at that positive's rank, counted pairwise.
fn ap_oracle(scores: &[f64], targets: &[bool]) -> Option<f64> {
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| targets[i]).collect();
    if positives.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &i in &positives {
        let rank = 1 + (0..scores.len()).filter(|&l| ahead(scores, l, i)).count();
        let hits = 1 + positives.iter().filter(|&&l| ahead(scores, l, i)).count();
        total += hits as f64 / rank as f64;
    }
    Some(total / positives.len() as f64)
}

pub struct Instance {
    n: usize,
    m: usize,
    scores: Vec<f64>,
    targets: Vec<bool>,
}

impl Instance {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.random_range(1..=8);
        let m = rng.random_range(1..=5);
        // A coarse grid half the time, so ties and exact-threshold scores occur.
        let coarse = rng.random::<bool>();
        let scores = (0..n * m)
            .map(|_| {
                if coarse {
                    rng.random_range(0..=4) as f64 / 4.0
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        let targets = (0..n * m).map(|_| rng.random::<bool>()).collect();
        Instance { n, m, scores, targets }
    }

    fn set(&self) -> PredictionSet {
        PredictionSet::new(self.n, self.m, self.scores.clone(), self.targets.clone()).unwrap()
    }

    fn column<V: Copy>(&self, v: &[V], j: usize) -> Vec<V> {
        (0..self.n).map(|i| v[i * self.m + j]).collect()
    }

    fn threshold(&self) -> Vec<bool> {
        self.scores.iter().map(|&s| s >= 0.5).collect()
    }

    fn topk(&self, k: usize) -> Vec<bool> {
        let mut out = vec![false; self.n * self.m];
        for i in 0..self.n {
            let row = &self.scores[i * self.m..(i + 1) * self.m];
            for j in 0..self.m {
                out[i * self.m + j] = (0..self.m).filter(|&l| ahead(row, l, j)).count() < k;
            }
        }
        out
    }
}

/// (CP, CR, CF1, OP, OR, OF1) by direct counting.
fn macro_micro_oracle(inst: &Instance, preds: &[bool]) -> [f64; 6] {
    let (mut cp, mut cr) = (0.0, 0.0);
    let (mut tp_all, mut fp_all, mut fn_all) = (0usize, 0usize, 0usize);
    for j in 0..inst.m {
        let p = inst.column(preds, j);
        let t = inst.column(&inst.targets, j);
        let tp = (0..inst.n).filter(|&i| p[i] && t[i]).count();
        let fp = (0..inst.n).filter(|&i| p[i] && !t[i]).count();
        let fneg = (0..inst.n).filter(|&i| !p[i] && t[i]).count();
        cp += div(tp as f64, (tp + fp) as f64);
        cr += div(tp as f64, (tp + fneg) as f64);
        tp_all += tp;
        fp_all += fp;
        fn_all += fneg;
    }
    cp /= inst.m as f64;
    cr /= inst.m as f64;
    let op = div(tp_all as f64, (tp_all + fp_all) as f64);
    let or = div(tp_all as f64, (tp_all + fn_all) as f64);
    [cp, cr, hmean(cp, cr), op, or, hmean(op, or)]
}

fn mean_accuracy_oracle(inst: &Instance, preds: &[bool]) -> Option<f64> {
    let mut total = 0.0;
    for j in 0..inst.m {
        let p = inst.column(preds, j);
        let t = inst.column(&inst.targets, j);
        let pos: Vec<usize> = (0..inst.n).filter(|&i| t[i]).collect();
        let neg: Vec<usize> = (0..inst.n).filter(|&i| !t[i]).collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let tpr = pos.iter().filter(|&&i| p[i]).count() as f64 / pos.len() as f64;
        let tnr = neg.iter().filter(|&&i| !p[i]).count() as f64 / neg.len() as f64;
        total += 0.5 * (tpr + tnr);
    }
    Some(total / inst.m as f64)
}

/// (Accu, Prec, Recall, F1 of averages, per-sample F1) from label sets.
fn instance_oracle(inst: &Instance, preds: &[bool]) -> [f64; 5] {
    let n = inst.n as f64;
    let mut acc = [0.0; 5];
    for i in 0..inst.n {
        let p: BTreeSet<usize> = (0..inst.m).filter(|&j| preds[i * inst.m + j]).collect();
        let y: BTreeSet<usize> = (0..inst.m).filter(|&j| inst.targets[i * inst.m + j]).collect();
        let inter = p.intersection(&y).count() as f64;
        let union = p.union(&y).count() as f64;
        let prec = div(inter, p.len() as f64);
        let rec = div(inter, y.len() as f64);
        acc[0] += div(inter, union) / n;
        acc[1] += prec / n;
        acc[2] += rec / n;
        acc[4] += hmean(prec, rec) / n;
    }
    acc[3] = hmean(acc[1], acc[2]);
    acc
}

type Check = Result<(), String>;

fn close(what: &str, got: f64, want: f64) -> Check {
    if (got - want).abs() <= TOL {
        Ok(())
    } else {
        Err(format!("{what}: {got} vs oracle {want}"))
    }
}

fn same<V: PartialEq + std::fmt::Debug>(what: &str, got: V, want: V) -> Check {
    if got == want {
        Ok(())
    } else {
        Err(format!("{what}: {got:?} vs oracle {want:?}"))
    }
}

fn close6(what: &str, got: MacroMicro, want: [f64; 6]) -> Check {
    let got = [got.cp, got.cr, got.cf1, got.op, got.or, got.of1];
    for (name, (g, w)) in ["CP", "CR", "CF1", "OP", "OR", "OF1"].iter().zip(got.iter().zip(want)) {
        close(&format!("{what} {name}"), *g, w)?;
    }
    Ok(())
}

/// Compares every metric with its oracle on `cases` random instances.
pub fn check_random_instances(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let inst = Instance::random(&mut rng);
        let set = inst.set();
        let what = format!("case {case} (N={}, M={})", inst.n, inst.m);

        for j in 0..inst.m {
            let s = inst.column(&inst.scores, j);
            let t = inst.column(&inst.targets, j);
            match (average_precision(&s, &t), ap_oracle(&s, &t)) {
                (Some(a), Some(b)) => close(&format!("{what} AP[{j}]"), a, b)?,
                (a, b) => same(&format!("{what} AP[{j}]"), a, b)?,
            }
        }

        let preds = set.binarize();
        same(&format!("{what} threshold"), &preds, &inst.threshold())?;
        close6(&what, macro_micro(&preds, &set), macro_micro_oracle(&inst, &preds))?;

        let k = rng.random_range(1..=inst.m);
        let top = topk_binarize(&set, k).map_err(|e| e.to_string())?;
        same(&format!("{what} top-{k}"), &top, &inst.topk(k))?;
        close6(&format!("{what} top-{k}"), macro_micro(&top, &set), macro_micro_oracle(&inst, &top))?;

        match (mean_accuracy(&preds, &set), mean_accuracy_oracle(&inst, &preds)) {
            (Ok(a), Some(b)) => close(&format!("{what} mA"), a, b)?,
            (Err(_), None) => {}
            (a, b) => return Err(format!("{what} mA: {a:?} vs oracle {b:?}")),
        }

        let got = instance_metrics(&preds, &set);
        let want = instance_oracle(&inst, &preds);
        let got = [got.accu, got.prec, got.recall, got.f1, got.f1_per_sample];
        for (name, (g, w)) in ["Accu", "Prec", "Recall", "F1", "F1/sample"].iter().zip(got.iter().zip(want)) {
            close(&format!("{what} {name}"), *g, w)?;
        }

        let report = evaluate(&set, k).map_err(|e| e.to_string())?;
        let aps: Vec<f64> = (0..inst.m)
            .filter_map(|j| ap_oracle(&inst.column(&inst.scores, j), &inst.column(&inst.targets, j)))
            .collect();
        match report.map {
            Some(map) => close(&format!("{what} mAP"), map, aps.iter().sum::<f64>() / aps.len() as f64)?,
            None if aps.is_empty() => {}
            None => return Err(format!("{what} mAP missing")),
        }
    }
    Ok(())
}
