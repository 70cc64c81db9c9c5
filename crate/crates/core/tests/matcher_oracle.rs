//! Independent f64 oracle for the transformer encoder layer, permutation
//! consistency of the matching heads, and directional finite-difference
//! checks of the end-to-end matching loss on a tiny configuration.

use fruitlet_assoc::autodiff::params::{GradStore, ParamBinding, ParamStore};
use fruitlet_assoc::autodiff::Tape;
use fruitlet_assoc::dataset::LabeledClusterPair;
use fruitlet_assoc::matcher::{
    encoder_layer, extract_matches, init_matcher_params, match_heads, match_loss, CorrespondenceSet,
    ForwardCtx, MatcherConfig,
};
use fruitlet_assoc::pipeline::{prepare_pair, Model, ModelConfig};
use fruitlet_assoc::shape_codec::ShapeCodecConfig;
use fruitlet_assoc::synth::{cluster_rng, generate_cluster_pair, SynthConfig};

// ---------------------------------------------------------------------------
// Minimal f64 row-major matrix helpers
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct M {
    r: usize,
    c: usize,
    d: Vec<f64>,
}

impl M {
    fn zeros(r: usize, c: usize) -> Self {
        Self { r, c, d: vec![0.0; r * c] }
    }

    fn from_f32(r: usize, c: usize, data: &[f32]) -> Self {
        Self { r, c, d: data.iter().map(|&v| v as f64).collect() }
    }

    fn mul(&self, o: &M) -> M {
        assert_eq!(self.c, o.r);
        let mut out = M::zeros(self.r, o.c);
        for i in 0..self.r {
            for k in 0..self.c {
                let a = self.d[i * self.c + k];
                for j in 0..o.c {
                    out.d[i * o.c + j] += a * o.d[k * o.c + j];
                }
            }
        }
        out
    }

    fn add_row_vec(&self, row: &[f64]) -> M {
        let mut out = self.clone();
        for i in 0..self.r {
            for j in 0..self.c {
                out.d[i * self.c + j] += row[j];
            }
        }
        out
    }

    fn add(&self, o: &M) -> M {
        let mut out = self.clone();
        for (a, b) in out.d.iter_mut().zip(&o.d) {
            *a += b;
        }
        out
    }

    fn cols(&self, lo: usize, hi: usize) -> M {
        let w = hi - lo;
        let mut out = M::zeros(self.r, w);
        for i in 0..self.r {
            out.d[i * w..(i + 1) * w].copy_from_slice(&self.d[i * self.c + lo..i * self.c + hi]);
        }
        out
    }

    fn t(&self) -> M {
        let mut out = M::zeros(self.c, self.r);
        for i in 0..self.r {
            for j in 0..self.c {
                out.d[j * self.r + i] = self.d[i * self.c + j];
            }
        }
        out
    }

    fn scale(&self, s: f64) -> M {
        let mut out = self.clone();
        for v in &mut out.d {
            *v *= s;
        }
        out
    }

    fn softmax_rows(&self) -> M {
        let mut out = self.clone();
        for i in 0..self.r {
            let row = &mut out.d[i * self.c..(i + 1) * self.c];
            let mx = row.iter().cloned().fold(f64::MIN, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }

    fn relu(&self) -> M {
        let mut out = self.clone();
        for v in &mut out.d {
            *v = v.max(0.0);
        }
        out
    }

    fn layer_norm(&self, gamma: &[f64], beta: &[f64]) -> M {
        let mut out = self.clone();
        for i in 0..self.r {
            let row = &mut out.d[i * self.c..(i + 1) * self.c];
            let mean: f64 = row.iter().sum::<f64>() / self.c as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / self.c as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = gamma[j] * (*v - mean) * inv + beta[j];
            }
        }
        out
    }
}

struct OracleParams<'a> {
    store: &'a ParamStore,
}

impl<'a> OracleParams<'a> {
    fn mat(&self, name: &str) -> M {
        let t = self.store.get(name).unwrap();
        assert_eq!(t.shape.len(), 2, "{name}");
        M::from_f32(t.shape[0], t.shape[1], &t.data)
    }

    fn vec(&self, name: &str) -> Vec<f64> {
        let t = self.store.get(name).unwrap();
        t.data.iter().map(|&v| v as f64).collect()
    }
}

fn oracle_mha(p: &OracleParams, prefix: &str, heads: usize, q_in: &M, kv_in: &M) -> M {
    let d = q_in.c;
    let hd = d / heads;
    let q = q_in.mul(&p.mat(&format!("{prefix}_q_w"))).add_row_vec(&p.vec(&format!("{prefix}_q_b")));
    let k = kv_in.mul(&p.mat(&format!("{prefix}_k_w"))).add_row_vec(&p.vec(&format!("{prefix}_k_b")));
    let v = kv_in.mul(&p.mat(&format!("{prefix}_v_w"))).add_row_vec(&p.vec(&format!("{prefix}_v_b")));
    let mut merged = M::zeros(q_in.r, d);
    for h in 0..heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let qh = q.cols(lo, hi);
        let kh = k.cols(lo, hi);
        let vh = v.cols(lo, hi);
        let scores = qh.mul(&kh.t()).scale(1.0 / (hd as f64).sqrt());
        let out = scores.softmax_rows().mul(&vh);
        for i in 0..merged.r {
            merged.d[i * d + lo..i * d + hi].copy_from_slice(&out.d[i * hd..(i + 1) * hd]);
        }
    }
    merged
        .mul(&p.mat(&format!("{prefix}_o_w")))
        .add_row_vec(&p.vec(&format!("{prefix}_o_b")))
}

fn oracle_block(p: &OracleParams, prefix: &str, heads: usize, x: &M, kv: &M, same: bool) -> M {
    let g1 = p.vec(&format!("{prefix}_ln1_gamma"));
    let b1 = p.vec(&format!("{prefix}_ln1_beta"));
    let xn = x.layer_norm(&g1, &b1);
    let kvn = if same { xn.clone() } else { kv.layer_norm(&g1, &b1) };
    let h = oracle_mha(p, prefix, heads, &xn, &kvn);
    let x = x.add(&h);

    let g2 = p.vec(&format!("{prefix}_ln2_gamma"));
    let b2 = p.vec(&format!("{prefix}_ln2_beta"));
    let xn2 = x.layer_norm(&g2, &b2);
    let f = xn2
        .mul(&p.mat(&format!("{prefix}_ffn1_w")))
        .add_row_vec(&p.vec(&format!("{prefix}_ffn1_b")))
        .relu()
        .mul(&p.mat(&format!("{prefix}_ffn2_w")))
        .add_row_vec(&p.vec(&format!("{prefix}_ffn2_b")));
    x.add(&f)
}

fn oracle_layer(p: &OracleParams, layer: usize, heads: usize, x_t: &M, x_t1: &M) -> (M, M) {
    let self_p = format!("l{layer}_self");
    let cross_p = format!("l{layer}_cross");
    let s_t = oracle_block(p, &self_p, heads, x_t, x_t, true);
    let s_t1 = oracle_block(p, &self_p, heads, x_t1, x_t1, true);
    let c_t = oracle_block(p, &cross_p, heads, &s_t, &s_t1, false);
    let c_t1 = oracle_block(p, &cross_p, heads, &s_t1, &s_t, false);
    (c_t, c_t1)
}

struct TestRng(u64);

impl TestRng {
    fn vec(&mut self, n: usize) -> Vec<f32> {
        (0..n)
            .map(|_| {
                self.0 ^= self.0 << 13;
                self.0 ^= self.0 >> 7;
                self.0 ^= self.0 << 17;
                ((self.0 >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
            })
            .collect()
    }
}

#[test]
fn encoder_layer_matches_f64_oracle() {
    let cfg = MatcherConfig {
        layers: 1,
        heads: 4,
        feature_dim: 16,
        ffn_dim: 24,
        dropout: 0.0,
        match_threshold: 0.1,
    };
    let params = init_matcher_params(&cfg, 42);
    let mut rng = TestRng(7);
    let xt_data = rng.vec(3 * 16);
    let xt1_data = rng.vec(4 * 16);

    let mut tape = Tape::new();
    let mut binding = ParamBinding::new();
    let mut bind =
        fruitlet_assoc::autodiff::params::Bind::new(&params, &mut binding, false, "");
    let x_t = tape.constant(vec![3, 16], xt_data.clone());
    let x_t1 = tape.constant(vec![4, 16], xt1_data.clone());
    let (out_t, out_t1) =
        encoder_layer(&mut tape, &mut bind, &cfg, 0, x_t, x_t1, &ForwardCtx::eval()).unwrap();

    let oracle = OracleParams { store: &params };
    let (ref_t, ref_t1) = oracle_layer(
        &oracle,
        0,
        4,
        &M::from_f32(3, 16, &xt_data),
        &M::from_f32(4, 16, &xt1_data),
    );
    for (got, want) in tape.data(out_t).iter().zip(&ref_t.d) {
        assert!(
            (*got as f64 - want).abs() < 1e-5,
            "day-t feature {got} vs oracle {want}"
        );
    }
    for (got, want) in tape.data(out_t1).iter().zip(&ref_t1.d) {
        assert!(
            (*got as f64 - want).abs() < 1e-5,
            "day-t1 feature {got} vs oracle {want}"
        );
    }
}

#[test]
fn permutation_consistency_of_scores_assignment_and_matches() {
    let cfg = MatcherConfig {
        layers: 2,
        heads: 2,
        feature_dim: 16,
        ffn_dim: 32,
        dropout: 0.0,
        match_threshold: 0.05,
    };
    let params = init_matcher_params(&cfg, 3);
    let mut rng = TestRng(99);
    let m = 4;
    let n = 5;
    let xt_data = rng.vec(m * 16);
    let xt1_data = rng.vec(n * 16);
    let perm = [3usize, 1, 0, 2];

    let forward = |t_data: &[f32]| {
        let mut tape = Tape::new();
        let mut binding = ParamBinding::new();
        let mut bind =
            fruitlet_assoc::autodiff::params::Bind::new(&params, &mut binding, false, "");
        let x_t = tape.constant(vec![m, 16], t_data.to_vec());
        let x_t1 = tape.constant(vec![n, 16], xt1_data.clone());
        let (a, b) =
            encoder_layer(&mut tape, &mut bind, &cfg, 0, x_t, x_t1, &ForwardCtx::eval()).unwrap();
        let heads = match_heads(&mut tape, &mut bind, &cfg, 0, a, b).unwrap();
        (
            tape.data(heads.scores).to_vec(),
            tape.data(heads.assignment).to_vec(),
            extract_matches(tape.data(heads.assignment), m, n, cfg.match_threshold),
        )
    };

    let (s0, p0, m0) = forward(&xt_data);
    let permuted: Vec<f32> =
        perm.iter().flat_map(|&i| xt_data[i * 16..(i + 1) * 16].to_vec()).collect();
    let (s1, p1, m1) = forward(&permuted);

    for (new_row, &old_row) in perm.iter().enumerate() {
        for j in 0..n {
            let ds = (s0[old_row * n + j] - s1[new_row * n + j]).abs();
            let dp = (p0[old_row * n + j] - p1[new_row * n + j]).abs();
            assert!(ds < 1e-4, "S row {old_row} col {j}: {ds}");
            assert!(dp < 1e-5, "P row {old_row} col {j}: {dp}");
        }
    }
    // Matches map (i, j) -> (pi^-1(i), j).
    let mut inverse = vec![0usize; m];
    for (new_row, &old_row) in perm.iter().enumerate() {
        inverse[old_row] = new_row;
    }
    let remapped: std::collections::BTreeSet<(usize, usize)> =
        m0.matches.iter().map(|&(i, j)| (inverse[i], j)).collect();
    let got: std::collections::BTreeSet<(usize, usize)> = m1.matches.iter().copied().collect();
    assert_eq!(remapped, got);
}

// ---------------------------------------------------------------------------
// End-to-end gradient check (tiny config)
// ---------------------------------------------------------------------------

fn tiny_model() -> (Model, LabeledClusterPair) {
    let cfg = ModelConfig {
        codec: ShapeCodecConfig::tiny(),
        matcher: MatcherConfig {
            layers: 2,
            heads: 2,
            feature_dim: 16,
            ffn_dim: 32,
            dropout: 0.0,
            match_threshold: 0.1,
        },
        ..ModelConfig::default()
    };
    let model = Model::init(cfg, 5).unwrap();
    let synth = SynthConfig {
        fruitlets_min: 3,
        fruitlets_max: 3,
        drop_probability: 0.0,
        ..SynthConfig::default()
    };
    let mut rng = cluster_rng(17, 4);
    let pair = generate_cluster_pair(&synth, "grad", &mut rng).unwrap();
    (model, pair)
}

/// End-to-end gradient check of the matcher stack on the tiny configuration
/// (d = 16, L = 2, heads = 2, M = N = 3): initial features through every
/// encoder layer, per-layer heads, and the matching loss.
///
/// Directional central differences (step 1e-3) along the analytic gradient
/// and seeded random unit directions must match the analytic directional
/// derivative within 1e-3 relative error. Gradients flow to the feature
/// inputs and to all matcher parameters. The voxel-codec path has its own
/// finite-difference coverage in `shape_codec_training.rs`.
#[test]
fn match_loss_end_to_end_gradient_check() {
    let cfg = MatcherConfig {
        layers: 2,
        heads: 2,
        feature_dim: 16,
        ffn_dim: 32,
        dropout: 0.0,
        match_threshold: 0.1,
    };
    let params = init_matcher_params(&cfg, 77);
    let mut rng = TestRng(501);
    let xt_data = rng.vec(3 * 16);
    let xt1_data = rng.vec(3 * 16);
    let gt = CorrespondenceSet::new(vec![(0, 1), (1, 0), (2, 2)], 3, 3).unwrap();

    // Loss and gradients for a given parameter store, with the feature
    // inputs optionally perturbed.
    let run = |store: &ParamStore,
               xt: &[f32],
               xt1: &[f32],
               want_grads: bool|
     -> (f64, Option<(GradStore, Vec<f32>, Vec<f32>)>) {
        let mut tape = Tape::new();
        let mut binding = ParamBinding::new();
        let mut bind =
            fruitlet_assoc::autodiff::params::Bind::new(store, &mut binding, want_grads, "");
        let x_t = tape.leaf(vec![3, 16], xt.to_vec());
        let x_t1 = tape.leaf(vec![3, 16], xt1.to_vec());
        let feats =
            fruitlet_assoc::matcher::encoder_forward(&mut tape, &mut bind, &cfg, x_t, x_t1, &ForwardCtx::eval())
                .unwrap();
        let mut layers = Vec::new();
        for (l, &(a, b)) in feats.iter().enumerate() {
            layers.push(match_heads(&mut tape, &mut bind, &cfg, l, a, b).unwrap());
        }
        let loss = match_loss(&mut tape, &layers, &gt).unwrap();
        let value = tape.value(loss) as f64;
        if !want_grads {
            return (value, None);
        }
        tape.backward(loss).unwrap();
        let mut grads = GradStore::new();
        binding.harvest(&tape, &mut grads);
        let gx = tape.grad(x_t).unwrap().to_vec();
        let gx1 = tape.grad(x_t1).unwrap().to_vec();
        (value, Some((grads, gx, gx1)))
    };

    let (_, full) = run(&params, &xt_data, &xt1_data, true);
    let (grads, gx, gx1) = full.unwrap();
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let grad_norm: f64 = names
        .iter()
        .filter_map(|n| grads.get(n))
        .flat_map(|g| g.iter().map(|&v| (v as f64) * (v as f64)))
        .chain(gx.iter().chain(&gx1).map(|&v| (v as f64) * (v as f64)))
        .sum::<f64>()
        .sqrt();
    assert!(grad_norm > 1e-3, "gradient should be non-trivial, norm {grad_norm}");

    let h = 1e-3f64;
    for dir_idx in 0..4 {
        // Direction over (params, x_t, x_t1): the analytic gradient for
        // direction 0, seeded random unit vectors otherwise.
        let mut dir_params: std::collections::BTreeMap<String, Vec<f32>> = Default::default();
        let (dir_x, dir_x1): (Vec<f32>, Vec<f32>);
        let mut sq = 0.0f64;
        for name in &names {
            let len = params.get(name).unwrap().data.len();
            let v: Vec<f32> = if dir_idx == 0 {
                grads.get(name).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
            } else {
                rng.vec(len)
            };
            sq += v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
            dir_params.insert(name.clone(), v);
        }
        if dir_idx == 0 {
            dir_x = gx.clone();
            dir_x1 = gx1.clone();
        } else {
            dir_x = rng.vec(gx.len());
            dir_x1 = rng.vec(gx1.len());
        }
        sq += dir_x.iter().chain(&dir_x1).map(|&x| (x as f64) * (x as f64)).sum::<f64>();
        let norm = sq.sqrt().max(1e-12);

        let analytic: f64 = (names
            .iter()
            .map(|n| {
                grads
                    .get(n)
                    .map(|g| {
                        g.iter()
                            .zip(&dir_params[n])
                            .map(|(&a, &b)| a as f64 * b as f64)
                            .sum::<f64>()
                    })
                    .unwrap_or(0.0)
            })
            .sum::<f64>()
            + gx.iter().zip(&dir_x).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>()
            + gx1.iter().zip(&dir_x1).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>())
            / norm;

        let eval_at = |sign: f64| -> f64 {
            let step = (sign * h / norm) as f32;
            let mut p = params.clone();
            for name in &names {
                let t = p.get_mut(name).unwrap();
                for (x, dv) in t.data.iter_mut().zip(&dir_params[name]) {
                    *x += step * dv;
                }
            }
            let xt: Vec<f32> =
                xt_data.iter().zip(&dir_x).map(|(&x, &d)| x + step * d).collect();
            let xt1: Vec<f32> =
                xt1_data.iter().zip(&dir_x1).map(|(&x, &d)| x + step * d).collect();
            run(&p, &xt, &xt1, false).0
        };
        let numeric = (eval_at(1.0) - eval_at(-1.0)) / (2.0 * h);
        let tol = 1e-3 * analytic.abs().max(numeric.abs()).max(1e-2 * grad_norm);
        assert!(
            (analytic - numeric).abs() <= tol,
            "direction {dir_idx}: analytic {analytic} vs numeric {numeric} (tol {tol})"
        );
    }
}

#[test]
fn match_loss_respects_unmatched_supervision() {
    // A pair with a dropped fruitlet: the loss must include the sigma terms,
    // so unmatched indices get gradient signal too.
    let synth = SynthConfig {
        fruitlets_min: 4,
        fruitlets_max: 4,
        drop_probability: 0.35,
        ..SynthConfig::default()
    };
    let mut pair = None;
    for k in 0..64 {
        let mut rng = cluster_rng(23, k);
        let cand = generate_cluster_pair(&synth, "drop", &mut rng).unwrap();
        let gt = cand.gt.as_ref().unwrap();
        if !gt.unmatched_t.is_empty()
            && !cand.obs_t.clouds.is_empty()
            && !cand.obs_t1.clouds.is_empty()
        {
            pair = Some(cand);
            break;
        }
    }
    let pair = pair.expect("a draw with a dropped fruitlet");
    let (model, _) = tiny_model();
    let prepared = prepare_pair(&pair, &model.cfg).unwrap();
    let gt = prepared.gt.clone().unwrap();
    let mut tape = Tape::new();
    let mut binding = ParamBinding::new();
    let out = model
        .forward(&mut tape, &mut binding, &prepared, &ForwardCtx::eval(), false)
        .unwrap();
    let loss = match_loss(&mut tape, &out.per_layer, &gt).unwrap();
    assert!(tape.value(loss).is_finite());
    assert!(tape.value(loss) > 0.0);
}

#[test]
fn correspondence_partition_is_exact() {
    let set = CorrespondenceSet::new(vec![(0, 2), (2, 0)], 3, 3).unwrap();
    assert_eq!(set.unmatched_t, vec![1]);
    assert_eq!(set.unmatched_t1, vec![1]);
}
