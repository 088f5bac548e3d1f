use super::layers::{attention_weights, dense, dense_backward, relu_inplace, sigmoid, softmax_backward, softmax_inplace};
use super::{AttentionIds, AutoDisIds, Gradients, ModelParams, PredictionTriple, TensorId};
use crate::error::{Error, Result};
use crate::features::autodis::{autodis_backward, autodis_embed_into, AutoDisCache, AutoDisGrads, AutoDisParams};
use crate::features::FeatureBundle;

/// An encoded input record plus what its backward pass needs.
#[derive(Clone, Debug, Default)]
struct Encoded {
    vec: Vec<f64>,
    autodis: Vec<AutoDisCache>,
}

#[derive(Clone, Debug, Default)]
struct AttentionTrace {
    q: Vec<f64>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    /// Per head, weights over the present records.
    weights: Vec<Vec<f64>>,
    mixed: Vec<f64>,
    out: Vec<f64>,
}

/// Activations of one forward pass, consumed by the backward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    history: Vec<Encoded>,
    ordered: Vec<Encoded>,
    target: Encoded,
    context: Encoded,
    history_attention: AttentionTrace,
    ordered_attention: AttentionTrace,
    z: Vec<f64>,
    experts: Vec<Vec<f64>>,
    gates: Vec<Vec<f64>>,
    /// Per task: inputs to each tower layer.
    towers: Vec<Vec<Vec<f64>>>,
    pub logits: [f64; 3],
    pub probs: [f64; 3],
}

impl ForwardTrace {
    pub fn prediction(&self) -> PredictionTriple {
        PredictionTriple::from_array(self.probs)
    }

    /// Per-head attention weights over the present history records.
    pub fn history_attention(&self) -> &[Vec<f64>] {
        &self.history_attention.weights
    }

    pub fn gate_weights(&self) -> &[Vec<f64>] {
        &self.gates
    }
}

impl ModelParams {
    fn data(&self, id: TensorId) -> &[f64] {
        &self.tensors[id].data
    }

    fn autodis_view(&self, ids: &AutoDisIds) -> AutoDisParams<'_> {
        AutoDisParams {
            w: self.data(ids.w),
            b: self.data(ids.b),
            mix: self.data(ids.mix),
            meta: self.data(ids.meta),
        }
    }

    fn encode(
        &self,
        codes: &[u32],
        tables: &[TensorId],
        scalars: &[f64],
        autodis: &[AutoDisIds],
    ) -> Result<Encoded> {
        let mut vec = Vec::new();
        for (code, &table) in codes.iter().zip(tables) {
            let t = &self.tensors[table];
            let (rows, width) = (t.shape[0], t.shape[1]);
            let code = *code as usize;
            if code >= rows {
                return Err(Error::Format(format!(
                    "code {code} out of range for {} ({rows} rows)",
                    t.name
                )));
            }
            vec.extend_from_slice(&t.data[code * width..(code + 1) * width]);
        }
        let d = self.config().autodis_dim;
        let tau = self.config().autodis_tau;
        let mut caches = Vec::with_capacity(scalars.len());
        for (x, ids) in scalars.iter().zip(autodis) {
            let start = vec.len();
            vec.resize(start + d, 0.0);
            let mut cache = AutoDisCache::default();
            autodis_embed_into(*x, &self.autodis_view(ids), tau, &mut cache, &mut vec[start..]);
            caches.push(cache);
        }
        Ok(Encoded {
            vec,
            autodis: caches,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn encode_backward(
        &self,
        codes: &[u32],
        tables: &[TensorId],
        scalars: &[f64],
        autodis: &[AutoDisIds],
        enc: &Encoded,
        d_vec: &[f64],
        grads: &mut Gradients,
    ) {
        let mut offset = 0;
        for (code, &table) in codes.iter().zip(tables) {
            let width = self.tensors[table].shape[1];
            let code = *code as usize;
            let g = &mut grads.data[table][code * width..(code + 1) * width];
            for (gi, di) in g.iter_mut().zip(&d_vec[offset..offset + width]) {
                *gi += di;
            }
            offset += width;
        }
        let d = self.config().autodis_dim;
        let tau = self.config().autodis_tau;
        for ((x, ids), cache) in scalars.iter().zip(autodis).zip(&enc.autodis) {
            let [gw, gb, gmix, gmeta] = grads
                .data
                .get_disjoint_mut([ids.w, ids.b, ids.mix, ids.meta])
                .expect("autodis tensors are distinct");
            autodis_backward(
                *x,
                &self.autodis_view(ids),
                tau,
                cache,
                &d_vec[offset..offset + d],
                &mut AutoDisGrads {
                    w: gw,
                    b: gb,
                    mix: gmix,
                    meta: gmeta,
                },
            );
            offset += d;
        }
    }

    fn attend(&self, ids: &AttentionIds, query_src: &[f64], inputs: &[Encoded]) -> AttentionTrace {
        let att = ids.q.output;
        let hd = self.config().head_dim;
        let q = dense(self.data(ids.q.w), None, query_src, att);
        let keys: Vec<Vec<f64>> = inputs
            .iter()
            .map(|e| dense(self.data(ids.k.w), None, &e.vec, att))
            .collect();
        let values: Vec<Vec<f64>> = inputs
            .iter()
            .map(|e| dense(self.data(ids.v.w), None, &e.vec, att))
            .collect();
        let mut mixed = vec![0.0; att];
        let mut weights = Vec::with_capacity(self.config().heads);
        let present = vec![true; inputs.len()];
        for h in 0..self.config().heads {
            let r = h * hd..(h + 1) * hd;
            let head_keys: Vec<&[f64]> = keys.iter().map(|k| &k[r.clone()]).collect();
            let w = attention_weights(&q[r.clone()], &head_keys, &present);
            for (wi, v) in w.iter().zip(&values) {
                for (m, vv) in mixed[r.clone()].iter_mut().zip(&v[r.clone()]) {
                    *m += wi * vv;
                }
            }
            weights.push(w);
        }
        let out = dense(self.data(ids.o.w), None, &mixed, att);
        AttentionTrace {
            q,
            keys,
            values,
            weights,
            mixed,
            out,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attend_backward(
        &self,
        ids: &AttentionIds,
        query_src: &[f64],
        inputs: &[Encoded],
        tr: &AttentionTrace,
        d_out: &[f64],
        grads: &mut Gradients,
        d_query_src: &mut [f64],
        d_inputs: &mut [Vec<f64>],
    ) {
        let att = ids.q.output;
        let hd = self.config().head_dim;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut d_mixed = vec![0.0; att];
        dense_backward(self.data(ids.o.w), &tr.mixed, d_out, &mut grads.data[ids.o.w], None, Some(&mut d_mixed));
        if inputs.is_empty() {
            return;
        }
        let n = inputs.len();
        let mut d_q = vec![0.0; att];
        let mut d_keys = vec![vec![0.0; att]; n];
        let mut d_values = vec![vec![0.0; att]; n];
        for h in 0..self.config().heads {
            let r = h * hd..(h + 1) * hd;
            let w = &tr.weights[h];
            let dm = &d_mixed[r.clone()];
            let mut d_w = vec![0.0; n];
            for s in 0..n {
                let v = &tr.values[s][r.clone()];
                d_w[s] = dm.iter().zip(v).map(|(a, b)| a * b).sum();
                for (dv, m) in d_values[s][r.clone()].iter_mut().zip(dm) {
                    *dv += w[s] * m;
                }
            }
            let d_score = softmax_backward(w, &d_w);
            let qh = &tr.q[r.clone()];
            for s in 0..n {
                let ds = d_score[s] * scale;
                if ds == 0.0 {
                    continue;
                }
                let k = &tr.keys[s][r.clone()];
                for ((dq, kk), (dk, qq)) in d_q[r.clone()]
                    .iter_mut()
                    .zip(k)
                    .zip(d_keys[s][r.clone()].iter_mut().zip(qh))
                {
                    *dq += ds * kk;
                    *dk += ds * qq;
                }
            }
        }
        dense_backward(self.data(ids.q.w), query_src, &d_q, &mut grads.data[ids.q.w], None, Some(d_query_src));
        for s in 0..n {
            dense_backward(self.data(ids.k.w), &inputs[s].vec, &d_keys[s], &mut grads.data[ids.k.w], None, Some(&mut d_inputs[s]));
            dense_backward(self.data(ids.v.w), &inputs[s].vec, &d_values[s], &mut grads.data[ids.v.w], None, Some(&mut d_inputs[s]));
        }
    }

    fn check_schema(&self, bundle: &FeatureBundle) -> Result<()> {
        let f = &self.config().features;
        if bundle.schema != self.schema_version()
            || bundle.history.len() != f.history_len
            || bundle.ordered.len() != f.ordered_len
            || bundle.history_mask.len() != f.history_len
            || bundle.ordered_mask.len() != f.ordered_len
        {
            return Err(Error::SchemaMismatch {
                expected: format!(
                    "{} (history {}, ordered {})",
                    self.schema_version(),
                    f.history_len,
                    f.ordered_len
                ),
                found: format!(
                    "{} (history {}, ordered {})",
                    bundle.schema,
                    bundle.history.len(),
                    bundle.ordered.len()
                ),
            });
        }
        Ok(())
    }

    fn history_tables(&self) -> [TensorId; 4] {
        let l = &self.layout;
        [l.category, l.duration, l.feedback, l.cross]
    }

    fn ordered_tables(&self) -> [TensorId; 3] {
        let l = &self.layout;
        [l.category, l.duration, l.cross]
    }

    fn target_tables(&self) -> [TensorId; 2] {
        [self.layout.category, self.layout.duration]
    }

    /// Runs the model and keeps every activation needed for [`Self::backward`].
    pub fn forward_trace(&self, bundle: &FeatureBundle) -> Result<ForwardTrace> {
        self.check_schema(bundle)?;
        let l = &self.layout;
        let cfg = self.config();

        let history = bundle
            .history
            .iter()
            .zip(&bundle.history_mask)
            .filter(|(_, m)| **m)
            .map(|(r, _)| self.encode(&r.codes, &self.history_tables(), &r.scalars, &l.history_autodis))
            .collect::<Result<Vec<_>>>()?;
        let ordered = bundle
            .ordered
            .iter()
            .zip(&bundle.ordered_mask)
            .filter(|(_, m)| **m)
            .map(|(r, _)| self.encode(&r.codes, &self.ordered_tables(), &r.scalars, &l.ordered_autodis))
            .collect::<Result<Vec<_>>>()?;
        let target = self.encode(&bundle.target.codes, &self.target_tables(), &bundle.target.scalars, &l.target_autodis)?;
        let context = self.encode(&bundle.context.codes, &[l.net], &bundle.context.scalars, &l.context_autodis)?;

        let history_attention = self.attend(&l.history_attention, &target.vec, &history);
        let ordered_attention = self.attend(&l.ordered_attention, &target.vec, &ordered);

        let mut z = Vec::with_capacity(cfg.mmoe_input_dim());
        z.extend_from_slice(&history_attention.out);
        z.extend_from_slice(&ordered_attention.out);
        z.extend_from_slice(&target.vec);
        z.extend_from_slice(&context.vec);

        let experts: Vec<Vec<f64>> = l
            .experts
            .iter()
            .map(|e| {
                let mut h = dense(self.data(e.w), e.b.map(|b| self.data(b)), &z, e.output);
                relu_inplace(&mut h);
                h
            })
            .collect();
        let mut gates = Vec::with_capacity(3);
        let mut towers = Vec::with_capacity(3);
        let mut logits = [0.0; 3];
        let mut probs = [0.0; 3];
        for t in 0..3 {
            let g_ids = &l.gates[t];
            let mut g = dense(self.data(g_ids.w), g_ids.b.map(|b| self.data(b)), &z, g_ids.output);
            softmax_inplace(&mut g);
            let mut mix = vec![0.0; cfg.expert_hidden];
            for (ge, h) in g.iter().zip(&experts) {
                for (m, hv) in mix.iter_mut().zip(h) {
                    *m += ge * hv;
                }
            }
            let layers = &l.towers[t];
            let mut acts = Vec::with_capacity(layers.len());
            acts.push(mix);
            for (i, d) in layers.iter().enumerate() {
                let mut y = dense(self.data(d.w), d.b.map(|b| self.data(b)), acts.last().unwrap(), d.output);
                if i + 1 < layers.len() {
                    relu_inplace(&mut y);
                    acts.push(y);
                } else {
                    logits[t] = y[0];
                }
            }
            probs[t] = sigmoid(logits[t]);
            gates.push(g);
            towers.push(acts);
        }
        Ok(ForwardTrace {
            history,
            ordered,
            target,
            context,
            history_attention,
            ordered_attention,
            z,
            experts,
            gates,
            towers,
            logits,
            probs,
        })
    }

    /// Predicts `has_next`, `effective_view` and `like` for the bundle's target.
    pub fn forward(&self, bundle: &FeatureBundle) -> Result<PredictionTriple> {
        Ok(self.forward_trace(bundle)?.prediction())
    }

    /// Accumulates parameter gradients given the derivative of the objective
    /// with respect to each task logit.
    pub fn backward(&self, bundle: &FeatureBundle, tr: &ForwardTrace, d_logits: [f64; 3], grads: &mut Gradients) {
        let l = &self.layout;
        let cfg = self.config();
        let mut d_z = vec![0.0; tr.z.len()];
        let mut d_experts = vec![vec![0.0; cfg.expert_hidden]; cfg.experts];
        for t in 0..3 {
            if d_logits[t] == 0.0 {
                continue;
            }
            let layers = &l.towers[t];
            let acts = &tr.towers[t];
            let mut d = vec![d_logits[t]];
            for i in (0..layers.len()).rev() {
                let ids = &layers[i];
                let mut d_in = vec![0.0; ids.input];
                let [gw, gb] = grads
                    .data
                    .get_disjoint_mut([ids.w, ids.b.unwrap()])
                    .expect("distinct tower tensors");
                dense_backward(self.data(ids.w), &acts[i], &d, gw, Some(gb), Some(&mut d_in));
                if i > 0 {
                    for (di, a) in d_in.iter_mut().zip(&acts[i]) {
                        if *a <= 0.0 {
                            *di = 0.0;
                        }
                    }
                }
                d = d_in;
            }
            let d_mix = d;
            let g = &tr.gates[t];
            let mut d_g = vec![0.0; cfg.experts];
            for e in 0..cfg.experts {
                d_g[e] = tr.experts[e].iter().zip(&d_mix).map(|(a, b)| a * b).sum();
                for (de, dm) in d_experts[e].iter_mut().zip(&d_mix) {
                    *de += g[e] * dm;
                }
            }
            let d_gl = softmax_backward(g, &d_g);
            let ids = &l.gates[t];
            let [gw, gb] = grads.data.get_disjoint_mut([ids.w, ids.b.unwrap()]).expect("distinct gate tensors");
            dense_backward(self.data(ids.w), &tr.z, &d_gl, gw, Some(gb), Some(&mut d_z));
        }
        for (e, ids) in l.experts.iter().enumerate() {
            let mut d_pre = d_experts[e].clone();
            for (d, h) in d_pre.iter_mut().zip(&tr.experts[e]) {
                if *h <= 0.0 {
                    *d = 0.0;
                }
            }
            let [gw, gb] = grads.data.get_disjoint_mut([ids.w, ids.b.unwrap()]).expect("distinct expert tensors");
            dense_backward(self.data(ids.w), &tr.z, &d_pre, gw, Some(gb), Some(&mut d_z));
        }

        let att = cfg.attention_dim();
        let (d_hist_out, rest) = d_z.split_at(att);
        let (d_ord_out, rest) = rest.split_at(att);
        let (d_target_z, d_context) = rest.split_at(cfg.target_dim());
        let mut d_target = d_target_z.to_vec();

        let mut d_history = vec![vec![0.0; cfg.history_dim()]; tr.history.len()];
        self.attend_backward(&l.history_attention, &tr.target.vec, &tr.history, &tr.history_attention, d_hist_out, grads, &mut d_target, &mut d_history);
        let mut d_ordered = vec![vec![0.0; cfg.ordered_dim()]; tr.ordered.len()];
        self.attend_backward(&l.ordered_attention, &tr.target.vec, &tr.ordered, &tr.ordered_attention, d_ord_out, grads, &mut d_target, &mut d_ordered);

        let present_history = bundle.history.iter().zip(&bundle.history_mask).filter(|(_, m)| **m).map(|(r, _)| r);
        for ((r, enc), d) in present_history.zip(&tr.history).zip(&d_history) {
            self.encode_backward(&r.codes, &self.history_tables(), &r.scalars, &l.history_autodis, enc, d, grads);
        }
        let present_ordered = bundle.ordered.iter().zip(&bundle.ordered_mask).filter(|(_, m)| **m).map(|(r, _)| r);
        for ((r, enc), d) in present_ordered.zip(&tr.ordered).zip(&d_ordered) {
            self.encode_backward(&r.codes, &self.ordered_tables(), &r.scalars, &l.ordered_autodis, enc, d, grads);
        }
        self.encode_backward(&bundle.target.codes, &self.target_tables(), &bundle.target.scalars, &l.target_autodis, &tr.target, &d_target, grads);
        self.encode_backward(&bundle.context.codes, &[l.net], &bundle.context.scalars, &l.context_autodis, &tr.context, d_context, grads);
    }
}
