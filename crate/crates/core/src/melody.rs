//! Melody extraction: a frozen teacher emitting note-bin distributions, the
//! trainable frame encoder whose output conditions the synthesizer, and the
//! distillation loss tying the two together through a projection layer.

use ndarray::Array2;

use crate::autodiff::{log_softmax_rows, Graph, Mat, Var};
use crate::corpus::{oracle_pitch, FeatureLayout, FeatureSequence, MAX_NOTE};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// 48 notes plus the unvoiced bin 0.
pub const TEACHER_BINS: usize = MAX_NOTE as usize + 1;
pub const TEACHER_EPSILON: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MelodyKind {
    /// Unnormalised extractor output.
    Student,
    /// Rows are probability vectors over [`TEACHER_BINS`].
    Teacher,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelodyRepresentation {
    pub values: Mat,
    pub kind: MelodyKind,
}

impl MelodyRepresentation {
    pub fn frame_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Frozen teacher. Emits `(1 - eps)` on the oracle note bin plus `eps / 49`
/// everywhere, at `rate_ratio` times the input frame rate.
pub fn teacher_extract(
    layout: &FeatureLayout,
    features: &FeatureSequence,
    rate_ratio: f64,
) -> Result<MelodyRepresentation> {
    if !(rate_ratio.is_finite() && rate_ratio > 0.0) {
        return Err(Error::Config(format!("teacher rate ratio must be positive, got {rate_ratio}")));
    }
    let notes = oracle_pitch(layout, features)?;
    let src = notes.len();
    let frames = ((src as f64 * rate_ratio).round() as usize).max(1);
    let floor = TEACHER_EPSILON / TEACHER_BINS as f64;
    let mut values = Array2::from_elem((frames, TEACHER_BINS), floor);
    for k in 0..frames {
        let s = (((k as f64 + 0.5) / rate_ratio) as usize).min(src - 1);
        values[[k, notes[s] as usize]] += 1.0 - TEACHER_EPSILON;
    }
    Ok(MelodyRepresentation {
        values,
        kind: MelodyKind::Teacher,
    })
}

/// Parameter names of the extractor and projection.
pub mod names {
    pub const W1: &str = "extractor.w1";
    pub const B1: &str = "extractor.b1";
    pub const W2: &str = "extractor.w2";
    pub const B2: &str = "extractor.b2";
    pub const W3: &str = "extractor.w3";
    pub const B3: &str = "extractor.b3";
    pub const PROJ_W: &str = "proj.w";
    pub const PROJ_B: &str = "proj.b";
}

pub fn init_extractor(
    params: &mut ParamStore,
    feature_dim: usize,
    hidden: usize,
    melody_dim: usize,
    rng: &mut impl rand::Rng,
) {
    params.insert_normal(names::W1, feature_dim, hidden, (1.0 / feature_dim as f64).sqrt(), rng);
    params.insert_zeros(names::B1, 1, hidden);
    params.insert_normal(names::W2, hidden, hidden, (1.0 / hidden as f64).sqrt(), rng);
    params.insert_zeros(names::B2, 1, hidden);
    params.insert_normal(names::W3, hidden, melody_dim, (1.0 / hidden as f64).sqrt(), rng);
    params.insert_zeros(names::B3, 1, melody_dim);
    params.insert_normal(names::PROJ_W, melody_dim, TEACHER_BINS, (1.0 / melody_dim as f64).sqrt(), rng);
    params.insert_zeros(names::PROJ_B, 1, TEACHER_BINS);
}

/// Frame-wise two-hidden-layer encoder, recorded on `g`.
pub fn student_forward(g: &mut Graph, params: &ParamStore, features: Var) -> Result<Var> {
    let w1 = g.param(names::W1, params.get(names::W1));
    if g.value(features).ncols() != g.value(w1).nrows() {
        return Err(Error::Shape(format!(
            "extractor expects {} channels, got {}",
            g.value(w1).nrows(),
            g.value(features).ncols()
        )));
    }
    let mut h = features;
    for (w, b, act) in [
        (names::W1, names::B1, true),
        (names::W2, names::B2, true),
        (names::W3, names::B3, false),
    ] {
        let wv = g.param(w, params.get(w));
        let bv = g.param(b, params.get(b));
        let lin = g.matmul(h, wv);
        h = g.add_row(lin, bv);
        if act {
            h = g.silu(h);
        }
    }
    Ok(h)
}

pub fn student_extract(params: &ParamStore, features: &FeatureSequence) -> Result<MelodyRepresentation> {
    let mut g = Graph::inference();
    let x = g.constant(features.frames.clone());
    let out = student_forward(&mut g, params, x)?;
    Ok(MelodyRepresentation {
        values: g.value(out).clone(),
        kind: MelodyKind::Student,
    })
}

/// `dst x src` matrix of linear-interpolation weights with aligned endpoints.
pub fn interpolation_matrix(src: usize, dst: usize) -> Mat {
    let mut w = Array2::zeros((dst, src));
    for k in 0..dst {
        let pos = if dst == 1 {
            (src - 1) as f64 / 2.0
        } else {
            k as f64 * (src - 1) as f64 / (dst - 1) as f64
        };
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        let frac = pos - lo as f64;
        w[[k, lo]] += 1.0 - frac;
        if frac > 0.0 {
            w[[k, hi]] += frac;
        }
    }
    w
}

/// Linear interpolation along time; teacher rows are re-normalised.
pub fn resample_melody(rep: &MelodyRepresentation, target_frames: usize) -> Result<MelodyRepresentation> {
    if target_frames == 0 {
        return Err(Error::Config("target_frames must be >= 1".into()));
    }
    if rep.frame_count() == 0 {
        return Err(Error::Config("cannot resample an empty representation".into()));
    }
    if target_frames == rep.frame_count() {
        return Ok(rep.clone());
    }
    let mut values = interpolation_matrix(rep.frame_count(), target_frames).dot(&rep.values);
    if rep.kind == MelodyKind::Teacher {
        for mut row in values.rows_mut() {
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
        }
    }
    Ok(MelodyRepresentation { values, kind: rep.kind })
}

/// Graph version of student resampling (the teacher side never needs gradients).
pub fn resample_graph(g: &mut Graph, student: Var, target_frames: usize) -> Var {
    let src = g.value(student).nrows();
    if src == target_frames {
        return student;
    }
    let w = g.constant(interpolation_matrix(src, target_frames));
    g.matmul(w, student)
}

/// Mean over frames of `KL(softmax(Proj(student)) || teacher)`, recorded on `g`.
pub fn kd_loss_graph(g: &mut Graph, params: &ParamStore, student: Var, teacher: &Mat) -> Result<Var> {
    if g.value(student).nrows() != teacher.nrows() {
        return Err(Error::Alignment(format!(
            "student has {} frames, teacher {}",
            g.value(student).nrows(),
            teacher.nrows()
        )));
    }
    let w = g.param(names::PROJ_W, params.get(names::PROJ_W));
    let b = g.param(names::PROJ_B, params.get(names::PROJ_B));
    if g.value(student).ncols() != g.value(w).nrows() || teacher.ncols() != g.value(w).ncols() {
        return Err(Error::Shape("projection does not match student/teacher widths".into()));
    }
    let lin = g.matmul(student, w);
    let logits = g.add_row(lin, b);
    let log_p = g.log_softmax_rows(logits);
    let p = g.exp(log_p);
    let log_q = g.constant(teacher.mapv(f64::ln));
    let diff = g.sub(log_p, log_q);
    let terms = g.mul(p, diff);
    let total = g.sum(terms);
    Ok(g.scale(total, 1.0 / teacher.nrows() as f64))
}

/// Distillation loss between frame-aligned student and teacher representations.
pub fn kd_loss(params: &ParamStore, student: &MelodyRepresentation, teacher: &MelodyRepresentation) -> Result<f64> {
    let mut g = Graph::inference();
    let s = g.constant(student.values.clone());
    let l = kd_loss_graph(&mut g, params, s, &teacher.values)?;
    Ok(g.scalar(l))
}

/// Softmax of the projected student, i.e. the distribution compared against the teacher.
pub fn projected_distribution(params: &ParamStore, student: &MelodyRepresentation) -> Mat {
    let logits = student.values.dot(params.get(names::PROJ_W)) + params.get(names::PROJ_B);
    log_softmax_rows(&logits).mapv(f64::exp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::rng;
    use ndarray::array;
    use rand::Rng;

    fn setup() -> (FeatureLayout, ParamStore) {
        let layout = FeatureLayout::new(32, 16).unwrap();
        let mut p = ParamStore::new();
        init_extractor(&mut p, 16, 24, 32, &mut rng::stream(1, &[]));
        (layout, p)
    }

    #[test]
    fn teacher_rows_are_softened_one_hots() {
        let (layout, _) = setup();
        let c = CorpusConfig::default();
        for clip in generate_corpus(20, &c, 2).unwrap() {
            let rep = teacher_extract(&layout, &clip.features, 1.0).unwrap();
            for (row, &note) in rep.values.rows().into_iter().zip(&clip.pitch_contour) {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v >= 0.0));
                let argmax = row.iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
                assert_eq!(argmax.0, note as usize);
                assert!((argmax.1 - (0.95 + 0.05 / 49.0)).abs() < 1e-15);
            }
            let fast = teacher_extract(&layout, &clip.features, 1.5).unwrap();
            assert_eq!(fast.frame_count(), 96);
            assert_eq!(fast, teacher_extract(&layout, &clip.features, 1.5).unwrap());
            for row in fast.values.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_final_layer_gives_zero_output() {
        let (_, mut p) = setup();
        p.insert_zeros(names::W3, 24, 32);
        let clip = generate_corpus(1, &CorpusConfig::default(), 0).unwrap().remove(0);
        let rep = student_extract(&p, &clip.features).unwrap();
        assert_eq!(rep.values.dim(), (64, 32));
        assert!(rep.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn student_shape_for_any_length() {
        let (_, p) = setup();
        for t in [1, 7, 33] {
            let f = FeatureSequence::new(Array2::ones((t, 16)), 1.0).unwrap();
            assert_eq!(student_extract(&p, &f).unwrap().values.dim(), (t, 32));
        }
        let bad = FeatureSequence::new(Array2::ones((3, 15)), 1.0).unwrap();
        assert!(matches!(student_extract(&p, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn student_gradient_matches_finite_difference() {
        let (_, p) = setup();
        let mut r = rng::stream(5, &[]);
        let x = Array2::from_shape_fn((6, 16), |_| r.random_range(-1.0..1.0));
        let probe = Array2::from_shape_fn((6, 32), |_| r.random_range(-1.0..1.0));
        let eval = |p: &ParamStore| -> f64 {
            let f = FeatureSequence::new(x.clone(), 1.0).unwrap();
            (student_extract(p, &f).unwrap().values * &probe).sum()
        };
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = student_forward(&mut g, &p, xv).unwrap();
        let pr = g.constant(probe.clone());
        let prod = g.mul(out, pr);
        let loss = g.sum(prod);
        let grads: std::collections::BTreeMap<_, _> = g.param_grads(&g.backward(loss)).into_iter().collect();
        for (name, idx) in [(names::W1, 17), (names::B2, 3), (names::W3, 100), (names::W2, 250)] {
            let h = 1e-6;
            let mut pp = p.clone();
            pp.set_scalar(name, idx, p.scalar_at(name, idx) + h);
            let mut pm = p.clone();
            pm.set_scalar(name, idx, p.scalar_at(name, idx) - h);
            let numeric = (eval(&pp) - eval(&pm)) / (2.0 * h);
            let m = &grads[name];
            let analytic = m[[idx / m.ncols(), idx % m.ncols()]];
            assert!((analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()).max(1e-8));
        }
    }

    fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
        p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
    }

    #[test]
    fn kd_loss_zero_when_distributions_match() {
        // identity-like projection: student logits pass straight through
        let mut p = ParamStore::new();
        p.insert(names::PROJ_W, Array2::eye(TEACHER_BINS));
        p.insert_zeros(names::PROJ_B, 1, TEACHER_BINS);
        let teacher_row: Vec<f64> = (0..TEACHER_BINS).map(|i| (i + 1) as f64).collect();
        let z: f64 = teacher_row.iter().sum();
        let teacher = Array2::from_shape_fn((3, TEACHER_BINS), |(_, j)| teacher_row[j] / z);
        let student = teacher.mapv(f64::ln);
        let s = MelodyRepresentation { values: student, kind: MelodyKind::Student };
        let t = MelodyRepresentation { values: teacher, kind: MelodyKind::Teacher };
        assert!(kd_loss(&p, &s, &t).unwrap().abs() < 1e-12);

        let uniform_t = MelodyRepresentation {
            values: Array2::from_elem((2, TEACHER_BINS), 1.0 / TEACHER_BINS as f64),
            kind: MelodyKind::Teacher,
        };
        let uniform_s = MelodyRepresentation { values: Array2::zeros((2, TEACHER_BINS)), kind: MelodyKind::Student };
        assert!(kd_loss(&p, &uniform_s, &uniform_t).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kd_loss_matches_direct_summation() {
        let mut p = ParamStore::new();
        p.insert(names::PROJ_W, Array2::eye(TEACHER_BINS));
        p.insert_zeros(names::PROJ_B, 1, TEACHER_BINS);
        let floor = 0.05 / 49.0;
        let mut teacher = Array2::from_elem((1, TEACHER_BINS), floor);
        teacher[[0, 12]] += 0.95;
        let s = MelodyRepresentation { values: Array2::zeros((1, TEACHER_BINS)), kind: MelodyKind::Student };
        let t = MelodyRepresentation { values: teacher.clone(), kind: MelodyKind::Teacher };
        let uniform = vec![1.0 / 49.0; 49];
        let expected = kl_oracle(&uniform, teacher.row(0).as_slice().unwrap());
        let got = kd_loss(&p, &s, &t).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!(got > 0.0);
    }

    #[test]
    fn kd_loss_positive_for_mismatch_and_checks_alignment() {
        let (_, p) = setup();
        let mut r = rng::stream(8, &[]);
        let s = MelodyRepresentation {
            values: Array2::from_shape_fn((4, 32), |_| r.random_range(-1.0..1.0)),
            kind: MelodyKind::Student,
        };
        let t = MelodyRepresentation {
            values: Array2::from_elem((4, TEACHER_BINS), 1.0 / 49.0),
            kind: MelodyKind::Teacher,
        };
        let loss = kd_loss(&p, &s, &t).unwrap();
        let q = projected_distribution(&p, &s);
        let oracle: f64 = (0..4)
            .map(|i| kl_oracle(q.row(i).as_slice().unwrap(), t.values.row(i).as_slice().unwrap()))
            .sum::<f64>()
            / 4.0;
        assert!(loss > 0.0);
        assert!((loss - oracle).abs() < 1e-12);
        let short = MelodyRepresentation { values: Array2::from_elem((3, 49), 1.0 / 49.0), kind: MelodyKind::Teacher };
        assert!(matches!(kd_loss(&p, &s, &short), Err(Error::Alignment(_))));
    }

    #[test]
    fn resample_examples() {
        let r = MelodyRepresentation { values: array![[0.0, 2.0], [4.0, 6.0]], kind: MelodyKind::Student };
        assert_eq!(resample_melody(&r, 2).unwrap(), r);
        let up = resample_melody(&r, 3).unwrap();
        assert_eq!(up.values.row(1), array![2.0, 4.0]);
        let constant = MelodyRepresentation { values: Array2::from_elem((5, 3), 0.7), kind: MelodyKind::Student };
        for n in [1, 2, 9, 17] {
            let out = resample_melody(&constant, n).unwrap();
            assert!(out.values.iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }
        assert!(matches!(resample_melody(&r, 0), Err(Error::Config(_))));
    }

    #[test]
    fn resampled_teacher_rows_stay_normalised() {
        let (layout, _) = setup();
        let clip = generate_corpus(1, &CorpusConfig::default(), 9).unwrap().remove(0);
        let t = teacher_extract(&layout, &clip.features, 1.5).unwrap();
        let back = resample_melody(&t, 64).unwrap();
        for row in back.values.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
