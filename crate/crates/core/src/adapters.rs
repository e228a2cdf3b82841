//! Adapter-based task modules: single adapters, adapter stacking and
//! adapter fusion, plus the freeze bookkeeping that decides which
//! parameters a task is allowed to train.
//!
//! An adapter is a bottleneck block applied after a layer's feed-forward
//! residual: `h + up(gelu(down(norm(h))))` with a parameter-free `norm`.
//! A fresh adapter has a zero up-projection and is therefore exactly the
//! identity.
//!
//! Fusion mixes the output deltas of several frozen member adapters with
//! single-head attention: the query comes from the layer state, keys and
//! values from each member's delta through projections shared across
//! members, so the fusion parameter count does not depend on how many
//! adapters are fused.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autograd::{Array, TensorId};
use crate::error::{Error, Result};
use crate::model::{ForwardPass, ModelConfig, UnifiedModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Single,
    Stack,
    Fusion,
}

/// A task module: which trained adapters participate in the forward pass
/// and which parameter names the task may train.
#[derive(Clone, Debug)]
pub struct AdapterTaskModule {
    pub kind: ModuleKind,
    /// Stack: bottom→top. Fusion: the fused set.
    pub members: Vec<String>,
    pub trainable: BTreeSet<String>,
}

// ── Forward passes ───────────────────────────────────────────────────

/// `h + up(gelu(down(norm(h))))` for the named adapter at the given slot.
pub fn adapter_forward(
    fp: &mut ForwardPass,
    name: &str,
    slot: &str,
    h: TensorId,
) -> Result<TensorId> {
    let p = format!("adapter/{name}/{slot}");
    let hn = fp.normalize(h)?;
    let wd = fp.param(&format!("{p}/down/weight"))?;
    let bd = fp.param(&format!("{p}/down/bias"))?;
    let wu = fp.param(&format!("{p}/up/weight"))?;
    let bu = fp.param(&format!("{p}/up/bias"))?;
    let z = fp.tape.matmul(hn, wd)?;
    let z = fp.tape.add_row(z, bd)?;
    let g = fp.tape.gelu(z);
    let up = fp.tape.matmul(g, wu)?;
    let up = fp.tape.add_row(up, bu)?;
    fp.tape.add(h, up)
}

/// Sequential application bottom→top.
pub fn stack_forward(
    fp: &mut ForwardPass,
    members: &[String],
    slot: &str,
    h: TensorId,
) -> Result<TensorId> {
    if members.is_empty() {
        return Err(Error::Input("stack_forward: empty adapter list".into()));
    }
    let mut out = h;
    for name in members {
        out = adapter_forward(fp, name, slot, out)?;
    }
    Ok(out)
}

/// Attention over member-adapter deltas.
///
/// Per position: `query = Q(norm(h))`, `keyᵢ/valueᵢ = K/V(adapterᵢ(h) − h)`,
/// weights softmax over members of `query·keyᵢ/√d_model`, and the output is
/// `h + O(Σᵢ wᵢ·valueᵢ)`. Identity members contribute zero deltas.
pub fn fusion_forward(
    fp: &mut ForwardPass,
    members: &[String],
    slot: &str,
    h: TensorId,
) -> Result<TensorId> {
    if members.is_empty() {
        return Err(Error::Input("fusion_forward: empty member list".into()));
    }
    let d = fp.config().d_model;
    let p = format!("fusion/{slot}");

    let hn = fp.normalize(h)?;
    let wq = fp.param(&format!("{p}/q/weight"))?;
    let bq = fp.param(&format!("{p}/q/bias"))?;
    let q = fp.tape.matmul(hn, wq)?;
    let q = fp.tape.add_row(q, bq)?;

    let wk = fp.param(&format!("{p}/k/weight"))?;
    let bk = fp.param(&format!("{p}/k/bias"))?;
    let wv = fp.param(&format!("{p}/v/weight"))?;
    let bv = fp.param(&format!("{p}/v/bias"))?;

    let t = fp.tape.shape(h)[0];
    let ones_col = Array::new(vec![d, 1], vec![1.0; d]).unwrap();
    let ones_row = Array::new(vec![1, d], vec![1.0; d]).unwrap();
    let ones_col = fp.tape.constant(&ones_col);
    let ones_row = fp.tape.constant(&ones_row);

    let mut score_cols = Vec::with_capacity(members.len());
    let mut values = Vec::with_capacity(members.len());
    for name in members {
        let out = adapter_forward(fp, name, slot, h)?;
        let neg_h = fp.tape.scale(h, -1.0);
        let delta = fp.tape.add(out, neg_h)?;

        let k = fp.tape.matmul(delta, wk)?;
        let k = fp.tape.add_row(k, bk)?;
        let v = fp.tape.matmul(delta, wv)?;
        let v = fp.tape.add_row(v, bv)?;

        // per-position dot product: row-sum of q ⊙ k as a [t, 1] column
        let qk = fp.tape.mul(q, k)?;
        let col = fp.tape.matmul(qk, ones_col)?;
        score_cols.push(col);
        values.push(v);
    }

    let scores = fp.tape.concat_cols(&score_cols)?;
    let scores = fp.tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = fp.tape.softmax_rows(scores); // [t, M], rows sum to 1

    let mut mixed: Option<TensorId> = None;
    for (i, &v) in values.iter().enumerate() {
        let w_col = fp.tape.slice_cols(weights, i, i + 1)?;
        let w_full = fp.tape.matmul(w_col, ones_row)?; // [t, d]
        let contrib = fp.tape.mul(w_full, v)?;
        mixed = Some(match mixed {
            None => contrib,
            Some(acc) => fp.tape.add(acc, contrib)?,
        });
    }
    let mixed = mixed.unwrap();
    debug_assert_eq!(fp.tape.shape(mixed), &[t, d]);

    let wo = fp.param(&format!("{p}/o/weight"))?;
    let bo = fp.param(&format!("{p}/o/bias"))?;
    let out = fp.tape.matmul(mixed, wo)?;
    let out = fp.tape.add_row(out, bo)?;
    fp.tape.add(h, out)
}

/// Routes one adapter slot through the module's forward form.
pub(crate) fn apply_slot(
    fp: &mut ForwardPass,
    module: &AdapterTaskModule,
    slot: &str,
    h: TensorId,
) -> Result<TensorId> {
    match module.kind {
        ModuleKind::Single => adapter_forward(fp, &module.members[0], slot, h),
        ModuleKind::Stack => stack_forward(fp, &module.members, slot, h),
        ModuleKind::Fusion => fusion_forward(fp, &module.members, slot, h),
    }
}

// ── Construction and freezing ────────────────────────────────────────

fn adapter_param_names(model: &UnifiedModel, name: &str) -> Vec<String> {
    let mut names = Vec::new();
    for slot in model.slot_names() {
        for part in ["down/weight", "down/bias", "up/weight", "up/bias"] {
            names.push(format!("adapter/{name}/{slot}/{part}"));
        }
    }
    names
}

fn cls_head_names() -> [String; 2] {
    ["head/cls/weight".to_string(), "head/cls/bias".to_string()]
}

/// Builds a task module over adapters already present in the model and
/// marks exactly the mandated trainable set; every other parameter is
/// frozen. `classification` adds the encoder classification head to the
/// trainable set of the task that owns it (Single: the sole member;
/// Stack: the top member). Fusion trains its attention blocks only.
pub fn build_task_module(
    model: &mut UnifiedModel,
    kind: ModuleKind,
    members: &[String],
    classification: bool,
) -> Result<AdapterTaskModule> {
    if members.is_empty() {
        return Err(Error::Config("task module needs at least one member".into()));
    }
    if kind == ModuleKind::Single && members.len() != 1 {
        return Err(Error::Config(format!(
            "single module takes exactly one member, got {}",
            members.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for m in members {
        if !seen.insert(m.clone()) {
            return Err(Error::Config(format!("duplicate member adapter {m}")));
        }
        if !model.has_adapter(m) {
            return Err(Error::Config(format!("missing member adapter {m}")));
        }
        // dimension sanity against the current config
        let down = model
            .params
            .get(&format!("adapter/{m}/enc0/down/weight"))?;
        let expect = [model.config.d_model, model.config.adapter_dim];
        if down.value.shape() != expect {
            return Err(Error::Config(format!(
                "adapter {m} has shape {:?}, model expects {:?}",
                down.value.shape(),
                expect
            )));
        }
    }
    if kind == ModuleKind::Fusion && !model.has_fusion() {
        return Err(Error::Config("fusion blocks not initialized".into()));
    }

    let mut trainable = BTreeSet::new();
    match kind {
        ModuleKind::Single => {
            trainable.extend(adapter_param_names(model, &members[0]));
            if classification {
                trainable.extend(cls_head_names());
            }
        }
        ModuleKind::Stack => {
            let top = members.last().unwrap();
            trainable.extend(adapter_param_names(model, top));
            if classification {
                trainable.extend(cls_head_names());
            }
        }
        ModuleKind::Fusion => {
            for slot in model.slot_names() {
                for part in ["q", "k", "v", "o"] {
                    trainable.insert(format!("fusion/{slot}/{part}/weight"));
                    trainable.insert(format!("fusion/{slot}/{part}/bias"));
                }
            }
        }
    }
    for name in &trainable {
        if !model.params.contains(name) {
            return Err(Error::Config(format!("trainable parameter {name} missing")));
        }
    }

    model.params.set_trainable_exactly(&trainable);
    Ok(AdapterTaskModule {
        kind,
        members: members.to_vec(),
        trainable,
    })
}

// ── Closed-form counts ───────────────────────────────────────────────

/// Scalar parameters of one adapter across all layers:
/// `L · (2·a·d + a + d)` (down + up projections with biases).
pub fn adapter_param_count(cfg: &ModelConfig) -> usize {
    let layers = cfg.encoder_layers + cfg.decoder_layers;
    let (d, a) = (cfg.d_model, cfg.adapter_dim);
    layers * (2 * a * d + a + d)
}

/// Scalar parameters of the fusion attention blocks across all layers:
/// `L · 4 · (d² + d)`, independent of the number of fused members.
pub fn fusion_param_count(cfg: &ModelConfig) -> usize {
    let layers = cfg.encoder_layers + cfg.decoder_layers;
    let d = cfg.d_model;
    layers * 4 * (d * d + d)
}

/// Scalar parameters of the encoder classification head.
pub fn cls_head_param_count(cfg: &ModelConfig) -> usize {
    cfg.d_model * cfg.n_class_labels + cfg.n_class_labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{finite_difference, max_rel_err};
    use crate::model::{count_parameters, count_trainable_under, CountFilter};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config_d4() -> ModelConfig {
        ModelConfig {
            d_model: 4,
            n_heads: 2,
            d_ff: 6,
            encoder_layers: 1,
            decoder_layers: 1,
            vocab_size: 8,
            n_class_labels: 2,
            max_positions: 8,
            adapter_dim: 2,
            d_input: 3,
        }
    }

    fn set_param(model: &mut UnifiedModel, name: &str, data: &[f64]) {
        let arr = model.params.value_mut(name).unwrap();
        assert_eq!(arr.numel(), data.len(), "{name}");
        arr.data_mut().copy_from_slice(data);
    }

    #[test]
    fn zero_init_adapter_is_identity() {
        let mut model = UnifiedModel::new(config_d4(), 1).unwrap();
        model.add_adapter("t", 2).unwrap();
        let h = Array::new(vec![2, 4], vec![0.5, -1.0, 2.0, 0.25, 1.0, 0.0, -0.5, 3.0]).unwrap();
        let mut fp = ForwardPass::new(&model, false);
        let hid = fp.tape.constant(&h);
        let out = adapter_forward(&mut fp, "t", "enc0", hid).unwrap();
        assert_eq!(
            fp.tape.value(out).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            h.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn adapter_hand_case() {
        // d_model=4, adapter_dim=2, hand-set weights; expected values from
        // a 50-digit evaluation of norm → down → gelu → up → residual.
        let mut model = UnifiedModel::new(config_d4(), 1).unwrap();
        model.add_adapter("t", 2).unwrap();
        set_param(
            &mut model,
            "adapter/t/enc0/down/weight",
            &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8],
        );
        set_param(&mut model, "adapter/t/enc0/down/bias", &[0.05, -0.05]);
        set_param(
            &mut model,
            "adapter/t/enc0/up/weight",
            &[0.2, -0.1, 0.4, 0.3, -0.6, 0.5, -0.4, 0.2],
        );
        set_param(&mut model, "adapter/t/enc0/up/bias", &[0.01, 0.02, -0.03, 0.04]);

        let h = Array::new(vec![1, 4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let mut fp = ForwardPass::new(&model, false);
        let hid = fp.tape.constant(&h);
        let out = adapter_forward(&mut fp, "t", "enc0", hid).unwrap();
        let expect = [
            0.31594292689147539,
            -0.82747031702304897,
            1.80389043947370571,
            0.30417069566200111,
        ];
        for (got, want) in fp.tape.value(out).iter().zip(expect) {
            assert!((got - want).abs() < 1e-13, "got {got}, want {want}");
        }
    }

    #[test]
    fn adapter_gradcheck() {
        let mut model = UnifiedModel::new(config_d4(), 3).unwrap();
        model.add_adapter("t", 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for part in ["down/weight", "down/bias", "up/weight", "up/bias"] {
            let name = format!("adapter/t/enc0/{part}");
            let arr = model.params.value_mut(&name).unwrap();
            for v in arr.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let hv: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let eval = |model: &UnifiedModel, h: &[f64]| {
            let mut fp = ForwardPass::new(model, false);
            let hid = fp.tape.constant(&Array::new(vec![2, 4], h.to_vec()).unwrap());
            let out = adapter_forward(&mut fp, "t", "enc0", hid).unwrap();
            let sq = fp.tape.mul(out, out).unwrap();
            let l = fp.tape.sum_all(sq);
            fp.tape.scalar(l)
        };

        // analytic gradient w.r.t. the down weight
        let mut fp = ForwardPass::new(&model, true);
        let hid = fp.tape.constant(&Array::new(vec![2, 4], hv.clone()).unwrap());
        let out = adapter_forward(&mut fp, "t", "enc0", hid).unwrap();
        let sq = fp.tape.mul(out, out).unwrap();
        let l = fp.tape.sum_all(sq);
        fp.tape.backward(l).unwrap();
        let wid = fp.param("adapter/t/enc0/down/weight").unwrap();
        let analytic = fp.tape.grad(wid).unwrap().to_vec();

        let base = model
            .params
            .get("adapter/t/enc0/down/weight")
            .unwrap()
            .value
            .clone();
        let mut probe = model;
        let numeric = finite_difference(base.data(), 1e-5, |vals| {
            probe
                .params
                .value_mut("adapter/t/enc0/down/weight")
                .unwrap()
                .data_mut()
                .copy_from_slice(vals);
            eval(&probe, &hv)
        });
        assert!(max_rel_err(&analytic, &numeric, 1e-3) < 1e-4);
    }

    #[test]
    fn stack_of_one_equals_single() {
        let mut model = UnifiedModel::new(config_d4(), 3).unwrap();
        model.add_adapter("a", 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let name = "adapter/a/enc0/up/weight";
        for v in model.params.value_mut(name).unwrap().data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        let h = Array::new(vec![2, 4], (0..8).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();

        let mut fp = ForwardPass::new(&model, false);
        let hid = fp.tape.constant(&h);
        let single = adapter_forward(&mut fp, "a", "enc0", hid).unwrap();
        let stacked = stack_forward(&mut fp, &["a".into()], "enc0", hid).unwrap();
        assert_eq!(fp.tape.value(single), fp.tape.value(stacked));
    }

    #[test]
    fn identity_top_reduces_to_bottom() {
        let mut model = UnifiedModel::new(config_d4(), 3).unwrap();
        model.add_adapter("bottom", 4).unwrap();
        model.add_adapter("top", 5).unwrap(); // zero-init => identity
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for v in model
            .params
            .value_mut("adapter/bottom/enc0/up/weight")
            .unwrap()
            .data_mut()
        {
            *v = rng.gen_range(-0.3..0.3);
        }
        let h = Array::new(vec![1, 4], vec![0.4, -0.2, 1.5, -1.1]).unwrap();
        let mut fp = ForwardPass::new(&model, false);
        let hid = fp.tape.constant(&h);
        let bottom_only = adapter_forward(&mut fp, "bottom", "enc0", hid).unwrap();
        let stacked =
            stack_forward(&mut fp, &["bottom".into(), "top".into()], "enc0", hid).unwrap();
        assert_eq!(fp.tape.value(bottom_only), fp.tape.value(stacked));
    }

    #[test]
    fn stack_order_matters() {
        let mut model = UnifiedModel::new(config_d4(), 3).unwrap();
        model.add_adapter("x", 4).unwrap();
        model.add_adapter("y", 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for ad in ["x", "y"] {
            for part in ["down/weight", "up/weight"] {
                let name = format!("adapter/{ad}/enc0/{part}");
                for v in model.params.value_mut(&name).unwrap().data_mut() {
                    *v = rng.gen_range(-0.8..0.8);
                }
            }
        }
        let h = Array::new(vec![1, 4], vec![0.9, -0.4, 0.3, 1.2]).unwrap();
        let mut fp = ForwardPass::new(&model, false);
        let hid = fp.tape.constant(&h);
        let xy = stack_forward(&mut fp, &["x".into(), "y".into()], "enc0", hid).unwrap();
        let yx = stack_forward(&mut fp, &["y".into(), "x".into()], "enc0", hid).unwrap();
        let diff: f64 = fp
            .tape
            .value(xy)
            .iter()
            .zip(fp.tape.value(yx))
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "stack order had no effect");
    }

    #[test]
    fn fusion_identity_members_leave_input_unchanged() {
        let mut model = UnifiedModel::new(config_d4(), 3).unwrap();
        model.add_adapter("a", 4).unwrap();
        model.add_adapter("b", 5).unwrap();
        model.add_fusion(6).unwrap();
        let h = Array::new(vec![2, 4], vec![0.5, -1.0, 2.0, 0.25, -0.3, 0.8, 0.1, -0.9]).unwrap();
        let mut fp = ForwardPass::new(&model, false);
        let hid = fp.tape.constant(&h);
        let out = fusion_forward(&mut fp, &["a".into(), "b".into()], "enc0", hid).unwrap();
        for (got, want) in fp.tape.value(out).iter().zip(h.data()) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn fusion_singleton_approximates_member() {
        let mut model = UnifiedModel::new(config_d4(), 3).unwrap();
        model.add_adapter("a", 4).unwrap();
        model.add_fusion(6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for part in ["down/weight", "up/weight", "up/bias"] {
            let name = format!("adapter/a/enc0/{part}");
            for v in model.params.value_mut(&name).unwrap().data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let h = Array::new(vec![2, 4], vec![0.5, -1.0, 2.0, 0.25, 1.3, -0.2, 0.0, 0.7]).unwrap();
        let mut fp = ForwardPass::new(&model, false);
        let hid = fp.tape.constant(&h);
        let member = adapter_forward(&mut fp, "a", "enc0", hid).unwrap();
        let fused = fusion_forward(&mut fp, &["a".into()], "enc0", hid).unwrap();
        let max_dev = fp
            .tape
            .value(member)
            .iter()
            .zip(fp.tape.value(fused))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_dev < 1e-8, "singleton fusion deviates by {max_dev}");
    }

    #[test]
    fn fusion_two_member_hand_case() {
        // d_model=2, adapter_dim=1, all weights hand-set; expected output
        // from a 50-digit evaluation of the delta-attention mixture.
        let cfg = ModelConfig {
            d_model: 2,
            n_heads: 1,
            d_ff: 3,
            encoder_layers: 1,
            decoder_layers: 1,
            vocab_size: 6,
            n_class_labels: 2,
            max_positions: 4,
            adapter_dim: 1,
            d_input: 2,
        };
        let mut model = UnifiedModel::new(cfg, 1).unwrap();
        model.add_adapter("a", 2).unwrap();
        model.add_adapter("b", 3).unwrap();
        model.add_fusion(4).unwrap();

        set_param(&mut model, "adapter/a/enc0/down/weight", &[0.3, -0.4]);
        set_param(&mut model, "adapter/a/enc0/down/bias", &[0.1]);
        set_param(&mut model, "adapter/a/enc0/up/weight", &[0.5, -0.2]);
        set_param(&mut model, "adapter/a/enc0/up/bias", &[0.05, -0.1]);
        set_param(&mut model, "adapter/b/enc0/down/weight", &[-0.7, 0.2]);
        set_param(&mut model, "adapter/b/enc0/down/bias", &[0.0]);
        set_param(&mut model, "adapter/b/enc0/up/weight", &[0.3, 0.6]);
        set_param(&mut model, "adapter/b/enc0/up/bias", &[-0.05, 0.1]);

        set_param(&mut model, "fusion/enc0/q/weight", &[0.4, -0.3, 0.2, 0.5]);
        set_param(&mut model, "fusion/enc0/q/bias", &[0.1, -0.1]);
        set_param(&mut model, "fusion/enc0/k/weight", &[0.6, 0.2, -0.1, 0.3]);
        set_param(&mut model, "fusion/enc0/k/bias", &[0.0, 0.05]);
        set_param(&mut model, "fusion/enc0/v/weight", &[1.1, -0.2, 0.3, 0.9]);
        set_param(&mut model, "fusion/enc0/v/bias", &[0.02, -0.02]);
        set_param(&mut model, "fusion/enc0/o/weight", &[0.9, 0.1, -0.2, 0.8]);
        set_param(&mut model, "fusion/enc0/o/bias", &[0.03, 0.01]);

        let h = Array::new(vec![1, 2], vec![0.8, -0.5]).unwrap();
        let mut fp = ForwardPass::new(&model, false);
        let hid = fp.tape.constant(&h);
        let out = fusion_forward(&mut fp, &["a".into(), "b".into()], "enc0", hid).unwrap();
        let expect = [0.98408183136470363, -0.59753911815267483];
        for (got, want) in fp.tape.value(out).iter().zip(expect) {
            assert!((got - want).abs() < 1e-13, "got {got}, want {want}");
        }
    }

    #[test]
    fn fusion_weights_form_distribution() {
        // verified indirectly: softmax rows sum to one is covered by the
        // engine; here we check the fused output is a convex mix by
        // bounding it between min and max member values after O=I, h=0.
        let mut model = UnifiedModel::new(config_d4(), 3).unwrap();
        model.add_adapter("a", 4).unwrap();
        model.add_adapter("b", 5).unwrap();
        model.add_fusion(6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for ad in ["a", "b"] {
            for part in ["down/weight", "up/weight"] {
                let name = format!("adapter/{ad}/enc0/{part}");
                for v in model.params.value_mut(&name).unwrap().data_mut() {
                    *v = rng.gen_range(-0.6..0.6);
                }
            }
        }
        let h = Array::new(vec![3, 4], (0..12).map(|i| (i as f64) * 0.2 - 1.0).collect()).unwrap();
        let mut fp = ForwardPass::new(&model, false);
        let hid = fp.tape.constant(&h);
        // deltas of each member
        let mut deltas = Vec::new();
        for ad in ["a", "b"] {
            let out = adapter_forward(&mut fp, ad, "enc0", hid).unwrap();
            let neg = fp.tape.scale(hid, -1.0);
            let delta = fp.tape.add(out, neg).unwrap();
            deltas.push(fp.tape.value(delta).to_vec());
        }
        let fused = fusion_forward(&mut fp, &["a".into(), "b".into()], "enc0", hid).unwrap();
        let fused_delta: Vec<f64> = fp
            .tape
            .value(fused)
            .iter()
            .zip(h.data())
            .map(|(o, hv)| o - hv)
            .collect();
        // with V=O=identity the fused delta is a per-position convex mix
        for i in 0..fused_delta.len() {
            let lo = deltas[0][i].min(deltas[1][i]) - 1e-9;
            let hi = deltas[0][i].max(deltas[1][i]) + 1e-9;
            assert!(
                fused_delta[i] >= lo && fused_delta[i] <= hi,
                "fused value escapes the member hull at {i}"
            );
        }
    }

    #[test]
    fn trainable_sets_per_kind() {
        let mut model = UnifiedModel::new(config_d4(), 3).unwrap();
        model.add_adapter("asr", 4).unwrap();
        model.add_adapter("er", 5).unwrap();
        model.add_fusion(6).unwrap();

        let single =
            build_task_module(&mut model, ModuleKind::Single, &["asr".into()], false).unwrap();
        assert!(single.trainable.iter().all(|n| n.starts_with("adapter/asr/")));
        assert_eq!(
            count_trainable_under(&model, &single),
            adapter_param_count(&model.config)
        );
        assert_eq!(
            count_parameters(&model, CountFilter::Trainable),
            adapter_param_count(&model.config)
        );

        let stack = build_task_module(
            &mut model,
            ModuleKind::Stack,
            &["asr".into(), "er".into()],
            true,
        )
        .unwrap();
        assert!(stack
            .trainable
            .iter()
            .all(|n| n.starts_with("adapter/er/") || n.starts_with("head/cls/")));
        assert_eq!(
            count_trainable_under(&model, &stack),
            adapter_param_count(&model.config) + cls_head_param_count(&model.config)
        );

        let fusion = build_task_module(
            &mut model,
            ModuleKind::Fusion,
            &["asr".into(), "er".into()],
            false,
        )
        .unwrap();
        assert!(fusion.trainable.iter().all(|n| n.starts_with("fusion/")));
        assert_eq!(
            count_trainable_under(&model, &fusion),
            fusion_param_count(&model.config)
        );
    }

    #[test]
    fn fusion_count_independent_of_members() {
        let mut model = UnifiedModel::new(config_d4(), 3).unwrap();
        model.add_adapter("a", 4).unwrap();
        model.add_adapter("b", 5).unwrap();
        model.add_adapter("c", 6).unwrap();
        model.add_fusion(7).unwrap();
        let two = build_task_module(
            &mut model,
            ModuleKind::Fusion,
            &["a".into(), "b".into()],
            false,
        )
        .unwrap();
        let three = build_task_module(
            &mut model,
            ModuleKind::Fusion,
            &["a".into(), "b".into(), "c".into()],
            false,
        )
        .unwrap();
        assert_eq!(
            count_trainable_under(&model, &two),
            count_trainable_under(&model, &three)
        );
    }

    #[test]
    fn build_rejects_bad_members() {
        let mut model = UnifiedModel::new(config_d4(), 3).unwrap();
        model.add_adapter("a", 4).unwrap();
        assert!(build_task_module(&mut model, ModuleKind::Single, &[], false).is_err());
        assert!(
            build_task_module(&mut model, ModuleKind::Single, &["ghost".into()], false).is_err()
        );
        assert!(build_task_module(
            &mut model,
            ModuleKind::Stack,
            &["a".into(), "a".into()],
            false
        )
        .is_err());
    }
}
