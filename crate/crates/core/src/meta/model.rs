//! Base network plus metric weights, and the two update steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metric::{
    argmax, metric_distances, metric_distances_graph, metric_logits, metric_logits_graph, residual_combine,
};
use crate::basenet::{BaseNetConfig, BaseNetwork, FeatureSet, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Graph, ParamId, ParamStore, Partition, Scalar, Tensor, Var};

pub const ETA_NAME: &str = "meta.eta";

/// Base logits and embeddings of one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    pub logits: Vec<T>,
    pub features: FeatureSet<T>,
}

/// Parameters `Ω = Φ ∪ Θ`: the base network and the `M×N_c` metric weights `η`.
#[derive(Debug, Clone, PartialEq)]
pub struct RfNet<T> {
    pub net: BaseNetwork,
    pub eta: ParamId,
    pub store: ParamStore<T>,
}

impl<T: Scalar> RfNet<T> {
    /// Seeded initialization; `η` starts at all ones.
    pub fn new(cfg: &BaseNetConfig, shape: [usize; 3], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = BaseNetwork::new(cfg, shape, &mut store, &mut rng)?;
        let eta = store.add(
            ETA_NAME,
            Partition::Meta,
            Tensor::filled(&[NUM_FEATURES, cfg.num_classes], T::one()),
        )?;
        Ok(Self { net, eta, store })
    }

    /// Rebinds a network layout to a store holding its values and `η`.
    pub fn from_parts(net: BaseNetwork, store: ParamStore<T>) -> Result<Self> {
        let eta = store
            .find(ETA_NAME)
            .ok_or_else(|| Error::Config(format!("parameter store lacks {ETA_NAME}")))?;
        if store.value(eta).shape() != [NUM_FEATURES, net.cfg.num_classes] {
            return Err(Error::ShapeMismatch(format!(
                "{ETA_NAME} has shape {:?}",
                store.value(eta).shape()
            )));
        }
        Ok(Self { net, eta, store })
    }

    pub fn num_classes(&self) -> usize {
        self.net.cfg.num_classes
    }

    pub fn eta_values(&self) -> &Tensor<T> {
        self.store.value(self.eta)
    }

    pub fn embed(&self, x: &Tensor<T>) -> Result<Embedding<T>> {
        let (logits, features) = self.net.infer(&self.store, x)?;
        Ok(Embedding { logits, features })
    }

    /// Sets `η` and the classifier `W_1` to zero, so every logit is zero.
    pub fn zero_heads(&mut self) {
        self.store.value_mut(self.eta).fill(T::zero());
        self.store.value_mut(self.net.w1).fill(T::zero());
    }

    pub fn cast<U: Scalar>(&self) -> RfNet<U> {
        RfNet {
            net: self.net.clone(),
            eta: self.eta,
            store: self.store.cast(),
        }
    }
}

/// Final logits `−Λ_j·η[:, j] + ŷ_j` from cached embeddings.
pub fn rfnet_logits<T: Scalar>(
    eta: &Tensor<T>,
    support: &[Vec<&Embedding<T>>],
    query: &Embedding<T>,
    residual: bool,
) -> Result<Vec<T>> {
    let feats: Vec<Vec<&FeatureSet<T>>> = support
        .iter()
        .map(|s| s.iter().map(|e| &e.features).collect())
        .collect();
    let lambda = metric_distances(&feats, &query.features)?;
    let z = metric_logits(&lambda, eta)?;
    if residual {
        residual_combine(&z, &query.logits)
    } else {
        Ok(z)
    }
}

/// Mean query cross-entropy with embeddings held fixed; only `η` is on the tape.
pub fn embedding_episode_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    eta: ParamId,
    support: &[Vec<&Embedding<T>>],
    query: &[(&Embedding<T>, usize)],
    residual: bool,
) -> Result<Var> {
    if query.is_empty() {
        return Err(Error::Episode("episode has no queries".into()));
    }
    let eta_v = g.param(store, eta);
    let feats: Vec<Vec<&FeatureSet<T>>> = support
        .iter()
        .map(|s| s.iter().map(|e| &e.features).collect())
        .collect();
    let mut losses = Vec::with_capacity(query.len());
    for &(q, label) in query {
        let lambda = g.constant(metric_distances(&feats, &q.features)?)?;
        let z = metric_logits_graph(g, lambda, eta_v)?;
        let logits = if residual {
            let y = g.constant(Tensor::vector(q.logits.clone()))?;
            g.add(z, y)?
        } else {
            z
        };
        losses.push(g.softmax_cross_entropy(logits, label)?);
    }
    g.mean_of(&losses)
}

/// The episode loss with every observation run through the network on the same tape.
pub fn full_episode_loss<T: Scalar>(
    g: &mut Graph<T>,
    net: &BaseNetwork,
    eta: ParamId,
    store: &ParamStore<T>,
    support: &[Vec<&Tensor<T>>],
    query: &[(&Tensor<T>, usize)],
) -> Result<Var> {
    if query.is_empty() {
        return Err(Error::Episode("episode has no queries".into()));
    }
    let mut sup = Vec::with_capacity(support.len());
    for shots in support {
        let mut vars = Vec::with_capacity(shots.len());
        for x in shots {
            vars.push(net.forward(g, store, x)?.features);
        }
        sup.push(vars);
    }
    let eta_v = g.param(store, eta);
    let mut losses = Vec::with_capacity(query.len());
    for &(x, label) in query {
        let out = net.forward(g, store, x)?;
        let lambda = metric_distances_graph(g, &sup, out.features)?;
        let z = metric_logits_graph(g, lambda, eta_v)?;
        let logits = g.add(z, out.logits)?;
        losses.push(g.softmax_cross_entropy(logits, label)?);
    }
    g.mean_of(&losses)
}

/// Mean support cross-entropy of the base logits, then one Adam step on all
/// of `Ω`. `η` is off this loss path, so its gradient is zero and Adam leaves it
/// unchanged. Returns the pre-step loss.
pub fn inner_train_step<T: Scalar>(
    model: &mut RfNet<T>,
    adam: &mut AdamState<T>,
    support: &[(&Tensor<T>, usize)],
) -> Result<f64> {
    if support.is_empty() {
        return Err(Error::Episode("empty support set".into()));
    }
    let scale = T::of(1.0 / support.len() as f64);
    let mut total = 0.0;
    for &(x, label) in support {
        let mut g = Graph::new();
        let out = model.net.forward(&mut g, &model.store, x)?;
        let ce = g.softmax_cross_entropy(out.logits, label)?;
        let l = g.scale(ce, scale)?;
        total += g.scalar(l).as_f64();
        g.backward_into(l, &mut model.store)?;
    }
    let ids: Vec<ParamId> = model.store.ids().collect();
    adam.step(&mut model.store, &ids)?;
    Ok(total)
}

/// Re-embeds the episode with the current `Φ`, then one Adam step on `η` only.
/// Returns the pre-step loss.
pub fn meta_train_step<T: Scalar>(
    model: &mut RfNet<T>,
    adam: &mut AdamState<T>,
    support: &[Vec<&Tensor<T>>],
    query: &[(&Tensor<T>, usize)],
    residual: bool,
) -> Result<f64> {
    let (sup, qry) = embed_episode(model, support, query)?;
    let sup_refs: Vec<Vec<&Embedding<T>>> = sup.iter().map(|s| s.iter().collect()).collect();
    let qry_refs: Vec<(&Embedding<T>, usize)> = qry.iter().map(|(e, l)| (e, *l)).collect();
    meta_step_on_embeddings(&mut model.store, model.eta, adam, &sup_refs, &qry_refs, residual)
}

/// One Adam step on `η` from fixed embeddings.
pub fn meta_step_on_embeddings<T: Scalar>(
    store: &mut ParamStore<T>,
    eta: ParamId,
    adam: &mut AdamState<T>,
    support: &[Vec<&Embedding<T>>],
    query: &[(&Embedding<T>, usize)],
    residual: bool,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = embedding_episode_loss(&mut g, store, eta, support, query, residual)?;
    let value = g.scalar(loss).as_f64();
    g.backward_into(loss, store)?;
    adam.step(store, &[eta])?;
    Ok(value)
}

#[allow(clippy::type_complexity)]
pub fn embed_episode<T: Scalar>(
    model: &RfNet<T>,
    support: &[Vec<&Tensor<T>>],
    query: &[(&Tensor<T>, usize)],
) -> Result<(Vec<Vec<Embedding<T>>>, Vec<(Embedding<T>, usize)>)> {
    let sup = support
        .iter()
        .map(|shots| shots.iter().map(|x| model.embed(x)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let qry = query
        .iter()
        .map(|&(x, l)| Ok((model.embed(x)?, l)))
        .collect::<Result<Vec<_>>>()?;
    Ok((sup, qry))
}

/// Predicted labels of the query set.
pub fn predict_queries<T: Scalar>(
    eta: &Tensor<T>,
    support: &[Vec<&Embedding<T>>],
    query: &[&Embedding<T>],
    residual: bool,
) -> Result<Vec<usize>> {
    query
        .iter()
        .map(|q| Ok(argmax(&rfnet_logits(eta, support, q, residual)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basenet::{Backbone, SpatialMode};
    use crate::meta::metric::cosine_distance;
    use crate::numerics::{finite_diff_check, Activation, GradCheckOptions};
    use rand::Rng;

    fn tiny() -> BaseNetConfig {
        BaseNetConfig {
            alpha: 4,
            iota: 3,
            activation: Activation::Relu,
            spatial_mode: SpatialMode::Fuse,
            backbone: Backbone::Cnn5 {
                channels: [2, 3, 4],
                hidden: 5,
            },
            adjust_channels: 2,
            pool_grid: (2, 2),
            num_classes: 2,
        }
    }

    fn input(seed: u64, shift: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![8, 4, 1],
            (0..32).map(|_| rng.random_range(-1.0..1.0) + shift).collect(),
        )
        .unwrap()
    }

    #[test]
    fn eta_starts_at_one_in_meta_partition() {
        let m = RfNet::<f64>::new(&tiny(), [8, 4, 1], 0).unwrap();
        assert!(m.eta_values().data().iter().all(|&v| v == 1.0));
        assert_eq!(m.store.get(m.eta).partition(), Partition::Meta);
        assert_eq!(m.store.ids_in(Partition::Meta), vec![m.eta]);
    }

    #[test]
    fn zero_lr_inner_step_changes_nothing() {
        let mut m = RfNet::<f64>::new(&tiny(), [8, 4, 1], 1).unwrap();
        let before = m.store.clone();
        let (a, b) = (input(1, 0.0), input(2, 0.0));
        inner_train_step(&mut m, &mut AdamState::new(0.0), &[(&a, 0), (&b, 1)]).unwrap();
        for (p, q) in m.store.iter().zip(before.iter()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn inner_step_lowers_support_loss_and_keeps_eta() {
        let mut m = RfNet::<f64>::new(&tiny(), [8, 4, 1], 2).unwrap();
        let (a, b) = (input(3, 1.0), input(4, -1.0));
        let support = [(&a, 0), (&b, 1)];
        let eta_before = m.eta_values().clone();
        let mut adam = AdamState::new(1e-2);
        let l0 = inner_train_step(&mut m, &mut adam, &support).unwrap();
        let l1 = inner_train_step(&mut m, &mut AdamState::new(0.0), &support).unwrap();
        assert!(l1 < l0, "{l0} -> {l1}");
        assert_eq!(m.eta_values(), &eta_before);
    }

    #[test]
    fn meta_step_freezes_base_and_respects_zero_lr() {
        let mut m = RfNet::<f64>::new(&tiny(), [8, 4, 1], 3).unwrap();
        let xs: Vec<Tensor<f64>> = (0..4)
            .map(|i| input(10 + i, if i % 2 == 0 { 1.0 } else { -1.0 }))
            .collect();
        let support = vec![vec![&xs[0]], vec![&xs[1]]];
        let query = [(&xs[2], 0), (&xs[3], 1)];

        let before = m.store.clone();
        meta_train_step(&mut m, &mut AdamState::new(0.0), &support, &query, true).unwrap();
        assert_eq!(m.store, before);

        meta_train_step(&mut m, &mut AdamState::new(0.05), &support, &query, true).unwrap();
        for id in m.store.ids_in(Partition::Base) {
            assert_eq!(m.store.value(id), before.value(id));
        }
        assert_ne!(m.eta_values(), before.value(m.eta));
    }

    #[test]
    fn full_loss_gradients_match_finite_differences() {
        let mut m = RfNet::<f64>::new(&tiny(), [8, 4, 1], 5).unwrap();
        crate::basenet::tests::jitter_biases(&mut m.store, 5);
        let xs: Vec<Tensor<f64>> = (0..4).map(|i| input(20 + i, 0.0)).collect();
        let net = m.net.clone();
        let eta = m.eta;
        let ids: Vec<ParamId> = m.store.ids().collect();
        let opts = GradCheckOptions {
            max_coords_per_param: Some(4),
            seed: 1,
            ..Default::default()
        };
        let r = finite_diff_check(&mut m.store, &ids, opts, |g, st| {
            full_episode_loss(
                g,
                &net,
                eta,
                st,
                &[vec![&xs[0]], vec![&xs[1]]],
                &[(&xs[2], 0), (&xs[3], 1)],
            )
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn embedding_loss_matches_full_loss_value() {
        let m = RfNet::<f64>::new(&tiny(), [8, 4, 1], 6).unwrap();
        let xs: Vec<Tensor<f64>> = (0..4).map(|i| input(30 + i, 0.0)).collect();
        let support = vec![vec![&xs[0]], vec![&xs[1]]];
        let query = [(&xs[2], 1), (&xs[3], 0)];
        let mut g = Graph::new();
        let full = full_episode_loss(&mut g, &m.net, m.eta, &m.store, &support, &query).unwrap();
        let full = g.scalar(full);
        let (s, q) = embed_episode(&m, &support, &query).unwrap();
        let sr: Vec<Vec<&Embedding<f64>>> = s.iter().map(|v| v.iter().collect()).collect();
        let qr: Vec<(&Embedding<f64>, usize)> = q.iter().map(|(e, l)| (e, *l)).collect();
        let mut g = Graph::new();
        let cached = embedding_episode_loss(&mut g, &m.store, m.eta, &sr, &qr, true).unwrap();
        assert!((g.scalar(cached) - full).abs() < 1e-12);
    }

    fn synthetic(rng: &mut ChaCha8Rng, class: usize, nc: usize, informative: bool) -> Embedding<f64> {
        let mut noise = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let h_time_k = noise(6);
        let h_freq_k = noise(6);
        let mut h_fuse = noise(nc + 2);
        if informative {
            h_fuse.iter_mut().for_each(|v| *v *= 0.2);
            h_fuse[class] += 2.0;
        }
        Embedding {
            logits: noise(nc),
            features: FeatureSet {
                h_time_k,
                h_freq_k,
                h_fuse,
            },
        }
    }

    fn synthetic_episode(
        rng: &mut ChaCha8Rng,
        nc: usize,
        shots: usize,
    ) -> (Vec<Vec<Embedding<f64>>>, Vec<Embedding<f64>>) {
        let sup = (0..nc)
            .map(|c| (0..shots).map(|_| synthetic(rng, c, nc, true)).collect())
            .collect();
        let qry = (0..nc).map(|c| synthetic(rng, c, nc, true)).collect();
        (sup, qry)
    }

    #[test]
    fn query_equal_to_support_shot_gets_its_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let nc = 4;
        let sup: Vec<Vec<Embedding<f64>>> = (0..nc).map(|c| vec![synthetic(&mut rng, c, nc, false)]).collect();
        let refs: Vec<Vec<&Embedding<f64>>> = sup.iter().map(|s| s.iter().collect()).collect();
        let eta = Tensor::filled(&[NUM_FEATURES, nc], 1.0);
        let query: Vec<&Embedding<f64>> = sup.iter().map(|s| &s[0]).collect();
        assert_eq!(predict_queries(&eta, &refs, &query, false).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn logits_permute_with_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let nc = 3;
        let (sup, qry) = synthetic_episode(&mut rng, nc, 2);
        let eta = Tensor::new(vec![NUM_FEATURES, nc], (0..9).map(|i| 0.5 + i as f64 * 0.1).collect()).unwrap();
        let refs: Vec<Vec<&Embedding<f64>>> = sup.iter().map(|s| s.iter().collect()).collect();
        let base = rfnet_logits(&eta, &refs, &qry[0], false).unwrap();
        let perm = [2, 0, 1];
        let prefs: Vec<Vec<&Embedding<f64>>> = perm.iter().map(|&c| refs[c].clone()).collect();
        let mut peta = Tensor::zeros(&[NUM_FEATURES, nc]);
        for m in 0..NUM_FEATURES {
            for (j, &c) in perm.iter().enumerate() {
                peta.data_mut()[m * nc + j] = eta.data()[m * nc + c];
            }
        }
        let permuted = rfnet_logits(&peta, &prefs, &qry[0], false).unwrap();
        for (j, &c) in perm.iter().enumerate() {
            assert!((permuted[j] - base[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_only_unit_weights_pick_cosine_nearest_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let nc = 5;
        let mut eta = Tensor::zeros(&[NUM_FEATURES, nc]);
        eta.data_mut()[2 * nc..].fill(1.0);
        for _ in 0..50 {
            let sup: Vec<Vec<Embedding<f64>>> = (0..nc)
                .map(|c| (0..2).map(|_| synthetic(&mut rng, c, nc, false)).collect())
                .collect();
            let q = synthetic(&mut rng, 0, nc, false);
            let refs: Vec<Vec<&Embedding<f64>>> = sup.iter().map(|s| s.iter().collect()).collect();
            let got = predict_queries(&eta, &refs, &[&q], false).unwrap()[0];
            let mean_dist: Vec<f64> = sup
                .iter()
                .map(|s| {
                    -s.iter()
                        .map(|e| cosine_distance(&e.features.h_fuse, &q.features.h_fuse).unwrap())
                        .sum::<f64>()
                        / 2.0
                })
                .collect();
            assert_eq!(got, argmax(&mean_dist));
        }
    }

    #[test]
    fn meta_steps_weight_the_informative_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let nc = 3;
        let mut store = ParamStore::new();
        let eta = store
            .add(ETA_NAME, Partition::Meta, Tensor::filled(&[NUM_FEATURES, nc], 1.0))
            .unwrap();
        let mut adam = AdamState::new(0.05);
        for _ in 0..200 {
            let (sup, qry) = synthetic_episode(&mut rng, nc, 1);
            let refs: Vec<Vec<&Embedding<f64>>> = sup.iter().map(|s| s.iter().collect()).collect();
            let q: Vec<(&Embedding<f64>, usize)> = qry.iter().enumerate().map(|(c, e)| (e, c)).collect();
            meta_step_on_embeddings(&mut store, eta, &mut adam, &refs, &q, false).unwrap();
        }
        let e = store.value(eta).data();
        let row_mean = |m: usize| e[m * nc..(m + 1) * nc].iter().map(|v| v.abs()).sum::<f64>() / nc as f64;
        assert!(row_mean(2) > row_mean(0) && row_mean(2) > row_mean(1), "{e:?}");
    }

    #[test]
    fn trained_eta_beats_uniform_on_informative_toy() {
        let nc = 3;
        let accuracy = |eta: &Tensor<f64>, rng: &mut ChaCha8Rng| {
            let mut correct = 0;
            for _ in 0..100 {
                let (sup, qry) = synthetic_episode(rng, nc, 1);
                let refs: Vec<Vec<&Embedding<f64>>> = sup.iter().map(|s| s.iter().collect()).collect();
                let q: Vec<&Embedding<f64>> = qry.iter().collect();
                let pred = predict_queries(eta, &refs, &q, true).unwrap();
                correct += pred.iter().enumerate().filter(|(c, p)| c == *p).count();
            }
            correct as f64 / (100 * nc) as f64
        };
        let (mut trained, mut uniform) = (0.0, 0.0);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut store = ParamStore::new();
            let eta = store
                .add(ETA_NAME, Partition::Meta, Tensor::filled(&[NUM_FEATURES, nc], 1.0))
                .unwrap();
            let mut adam = AdamState::new(0.05);
            for _ in 0..100 {
                let (sup, qry) = synthetic_episode(&mut rng, nc, 1);
                let refs: Vec<Vec<&Embedding<f64>>> = sup.iter().map(|s| s.iter().collect()).collect();
                let q: Vec<(&Embedding<f64>, usize)> = qry.iter().enumerate().map(|(c, e)| (e, c)).collect();
                meta_step_on_embeddings(&mut store, eta, &mut adam, &refs, &q, true).unwrap();
            }
            let mut eval_rng = ChaCha8Rng::seed_from_u64(200 + seed);
            trained += accuracy(store.value(eta), &mut eval_rng);
            let mut eval_rng = ChaCha8Rng::seed_from_u64(200 + seed);
            uniform += accuracy(&Tensor::filled(&[NUM_FEATURES, nc], 1.0), &mut eval_rng);
        }
        assert!(
            trained >= uniform,
            "trained {} vs uniform {}",
            trained / 5.0,
            uniform / 5.0
        );
    }
}
