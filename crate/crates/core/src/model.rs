//! Full segmentation model: parameter initialization and the end-to-end
//! forward graph (encode, prompt, decode, loss). Frozen backbone weights and
//! trainable adapter/prompt/decoder weights live in one [`ParamStore`];
//! binding clones them into a graph once per batch so gradients accumulate
//! across the batch naturally.

use crate::config::RunConfig;
use crate::decoder::{
    self, CrossAttnNodes, LossWeights, MaskHeadNodes, SelfAttnNodes, SemanticMask,
};
use crate::encoder::{self, AdapterNodes, BlockNodes, PATCH};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::instance::{connected_components, split_touching, InstanceMap};
use crate::params::{gaussian, seed_stream, xavier, ParamStore};
use crate::prompt::{self, PointPromptSet, PositionEncoder, PromptConvNodes};
use crate::tensor::Tensor;

pub struct Model {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub pos_encoder: PositionEncoder,
}

/// Zero-mean unit-variance normalization over all pixels of one image.
fn standardize(image: &Tensor) -> Result<Tensor> {
    let n = image.numel() as f64;
    let mean = image.data().iter().sum::<f64>() / n;
    let var = image.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-8).sqrt();
    let out = image.map(|v| (v - mean) * inv);
    out.check_finite("standardized image")?;
    Ok(out)
}

/// Graph handles for every parameter of one bound forward pass, plus the
/// (name, node) list used to pull trainable gradients back out.
pub struct Bound {
    pub trainable: Vec<(String, NodeId)>,
    pub patch_w: NodeId,
    pub pos_embed: NodeId,
    pub blocks: Vec<BlockNodes>,
    pub gkp: Option<PromptConvNodes>,
    pub point_embed: NodeId,
    pub queries: NodeId,
    pub self_attn: Option<SelfAttnNodes>,
    pub cross: Vec<Option<CrossAttnNodes>>,
    pub head: MaskHeadNodes,
}

impl Model {
    /// Initialize all weights from the config seed: frozen backbone tensors
    /// on one stream, trainable tensors on another. Adapter up-projections
    /// and gates start at zero, so training starts from the frozen baseline.
    pub fn init(cfg: &RunConfig) -> Result<Model> {
        cfg.validate()?;
        let d = cfg.dim;
        let cp = cfg.prompt_dim;
        let t = cfg.tokens();
        let patch_dim = PATCH * PATCH; // single-channel images
        let mut frozen = seed_stream(cfg.seed, "frozen");
        let mut train = seed_stream(cfg.seed, "trainable");
        let mut store = ParamStore::new();

        store.insert(
            "enc.patch.w",
            gaussian(&[patch_dim, d], 0.0, 0.02, &mut frozen),
            false,
        );
        store.insert("enc.pos", gaussian(&[t, d], 0.0, 0.02, &mut frozen), false);
        let d_ff = d * cfg.mlp_ratio;
        for b in 0..cfg.blocks {
            for name in ["q", "k", "v"] {
                store.insert(
                    &format!("enc.b{b}.{name}"),
                    xavier(&[d, d], d, d, &mut frozen),
                    false,
                );
            }
            store.insert(
                &format!("enc.b{b}.ffn.w1"),
                xavier(&[d, d_ff], d, d_ff, &mut frozen),
                false,
            );
            store.insert(&format!("enc.b{b}.ffn.b1"), Tensor::zeros(&[d_ff]), false);
            store.insert(
                &format!("enc.b{b}.ffn.w2"),
                xavier(&[d_ff, d], d_ff, d, &mut frozen),
                false,
            );
            store.insert(&format!("enc.b{b}.ffn.b2"), Tensor::zeros(&[d]), false);
            if cfg.hs_adapter {
                let dims = cfg.space_dims()?;
                let n = dims.len();
                store.insert(
                    &format!("enc.b{b}.adapter.gate_attn"),
                    Tensor::zeros(&[d, n]),
                    true,
                );
                store.insert(
                    &format!("enc.b{b}.adapter.gate_ffn"),
                    Tensor::zeros(&[d, n]),
                    true,
                );
                for branch in ["que", "val", "ffn"] {
                    for (j, &dj) in dims.iter().enumerate() {
                        store.insert(
                            &format!("enc.b{b}.adapter.{branch}.down{j}"),
                            xavier(&[d, dj], d, dj, &mut train),
                            true,
                        );
                        store.insert(
                            &format!("enc.b{b}.adapter.{branch}.up{j}"),
                            Tensor::zeros(&[dj, d]),
                            true,
                        );
                    }
                }
            }
        }

        if cfg.gkp_encoder {
            let (c1, c2) = crate::prompt::PromptConvParams::channels(cp);
            store.insert(
                "gkp.conv1.w",
                xavier(&[c1, 1, 2, 2], 4, c1 * 4, &mut train),
                true,
            );
            store.insert("gkp.conv1.b", Tensor::zeros(&[c1]), true);
            store.insert("gkp.norm.g", Tensor::full(&[c1], 1.0), true);
            store.insert("gkp.norm.b", Tensor::zeros(&[c1]), true);
            store.insert(
                "gkp.conv2.w",
                xavier(&[c2, c1, 2, 2], c1 * 4, c2 * 4, &mut train),
                true,
            );
            store.insert("gkp.conv2.b", Tensor::zeros(&[c2]), true);
            store.insert(
                "gkp.conv3.w",
                xavier(&[cp, c2, 4, 4], c2 * 16, cp * 16, &mut train),
                true,
            );
            store.insert("gkp.conv3.b", Tensor::zeros(&[cp]), true);
        }
        store.insert(
            "pos.point_embed",
            gaussian(&[cp], 0.0, 0.02, &mut train),
            true,
        );

        store.insert(
            "dec.queries",
            gaussian(&[cfg.categories, cp], 0.0, 0.02, &mut train),
            true,
        );
        if cfg.tsm_decoder {
            for name in ["wq", "wk", "wv"] {
                store.insert(
                    &format!("dec.sa.{name}"),
                    xavier(&[cp, cp], cp, cp, &mut train),
                    true,
                );
            }
        }
        if cfg.decoder_proj {
            let sets = if cfg.decoder_unshared { 2 } else { 1 };
            for s in 0..sets {
                for name in ["wq", "wk", "wv"] {
                    store.insert(
                        &format!("dec.ca{s}.{name}"),
                        xavier(&[cp, cp], cp, cp, &mut train),
                        true,
                    );
                }
            }
        }
        let (u1, u2) = (cp / 4, cp / 8);
        store.insert(
            "dec.up1.w",
            xavier(&[cp, u1, 4, 4], cp * 16, u1 * 16, &mut train),
            true,
        );
        store.insert("dec.up1.b", Tensor::zeros(&[u1]), true);
        store.insert(
            "dec.up2.w",
            xavier(&[u1, u2, 4, 4], u1 * 16, u2 * 16, &mut train),
            true,
        );
        store.insert("dec.up2.b", Tensor::zeros(&[u2]), true);
        store.insert("dec.mlp.w1", xavier(&[cp, cp], cp, cp, &mut train), true);
        store.insert("dec.mlp.b1", Tensor::zeros(&[cp]), true);
        store.insert("dec.mlp.w2", xavier(&[cp, u2], cp, u2, &mut train), true);
        store.insert("dec.mlp.b2", Tensor::zeros(&[u2]), true);

        Ok(Model {
            cfg: cfg.clone(),
            store,
            pos_encoder: PositionEncoder::new(cp, cfg.seed)?,
        })
    }

    fn bind_one(
        &self,
        g: &mut Graph,
        trainable: &mut Vec<(String, NodeId)>,
        name: &str,
    ) -> Result<NodeId> {
        let id = g.input(self.store.get(name)?.clone());
        if self.store.is_trainable(name) {
            trainable.push((name.to_string(), id));
        }
        Ok(id)
    }

    /// Bind every parameter into the graph once; reuse across a whole batch.
    pub fn bind(&self, g: &mut Graph) -> Result<Bound> {
        let mut tr = Vec::new();
        let patch_w = self.bind_one(g, &mut tr, "enc.patch.w")?;
        let pos_embed = self.bind_one(g, &mut tr, "enc.pos")?;
        let mut blocks = Vec::with_capacity(self.cfg.blocks);
        for b in 0..self.cfg.blocks {
            let adapter = if self.cfg.hs_adapter {
                let dims = self.cfg.space_dims()?;
                let pairs = |branch: &str,
                                 g: &mut Graph,
                                 tr: &mut Vec<(String, NodeId)>|
                 -> Result<Vec<(NodeId, NodeId)>> {
                    (0..dims.len())
                        .map(|j| {
                            Ok((
                                self.bind_one(
                                    g,
                                    tr,
                                    &format!("enc.b{b}.adapter.{branch}.down{j}"),
                                )?,
                                self.bind_one(
                                    g,
                                    tr,
                                    &format!("enc.b{b}.adapter.{branch}.up{j}"),
                                )?,
                            ))
                        })
                        .collect()
                };
                Some(AdapterNodes {
                    gate_attn: self.bind_one(g, &mut tr, &format!("enc.b{b}.adapter.gate_attn"))?,
                    gate_ffn: self.bind_one(g, &mut tr, &format!("enc.b{b}.adapter.gate_ffn"))?,
                    que: pairs("que", g, &mut tr)?,
                    val: pairs("val", g, &mut tr)?,
                    ffn: pairs("ffn", g, &mut tr)?,
                })
            } else {
                None
            };
            blocks.push(BlockNodes {
                q: self.bind_one(g, &mut tr, &format!("enc.b{b}.q"))?,
                k: self.bind_one(g, &mut tr, &format!("enc.b{b}.k"))?,
                v: self.bind_one(g, &mut tr, &format!("enc.b{b}.v"))?,
                w1: self.bind_one(g, &mut tr, &format!("enc.b{b}.ffn.w1"))?,
                b1: self.bind_one(g, &mut tr, &format!("enc.b{b}.ffn.b1"))?,
                w2: self.bind_one(g, &mut tr, &format!("enc.b{b}.ffn.w2"))?,
                b2: self.bind_one(g, &mut tr, &format!("enc.b{b}.ffn.b2"))?,
                heads: self.cfg.heads,
                adapter,
            });
        }
        let gkp = if self.cfg.gkp_encoder {
            Some(PromptConvNodes {
                conv1: self.bind_one(g, &mut tr, "gkp.conv1.w")?,
                bias1: self.bind_one(g, &mut tr, "gkp.conv1.b")?,
                norm_gain: self.bind_one(g, &mut tr, "gkp.norm.g")?,
                norm_bias: self.bind_one(g, &mut tr, "gkp.norm.b")?,
                conv2: self.bind_one(g, &mut tr, "gkp.conv2.w")?,
                bias2: self.bind_one(g, &mut tr, "gkp.conv2.b")?,
                conv3: self.bind_one(g, &mut tr, "gkp.conv3.w")?,
                bias3: self.bind_one(g, &mut tr, "gkp.conv3.b")?,
            })
        } else {
            None
        };
        let point_embed = self.bind_one(g, &mut tr, "pos.point_embed")?;
        let queries = self.bind_one(g, &mut tr, "dec.queries")?;
        let self_attn = if self.cfg.tsm_decoder {
            Some(SelfAttnNodes {
                wq: self.bind_one(g, &mut tr, "dec.sa.wq")?,
                wk: self.bind_one(g, &mut tr, "dec.sa.wk")?,
                wv: self.bind_one(g, &mut tr, "dec.sa.wv")?,
            })
        } else {
            None
        };
        let iterations = if self.cfg.tsm_decoder { 2 } else { 1 };
        let mut cross: Vec<Option<CrossAttnNodes>> = Vec::new();
        for it in 0..iterations {
            if self.cfg.decoder_proj {
                let s = if self.cfg.decoder_unshared && it == 1 { 1 } else { 0 };
                cross.push(Some(CrossAttnNodes {
                    wq: self.bind_one(g, &mut tr, &format!("dec.ca{s}.wq"))?,
                    wk: self.bind_one(g, &mut tr, &format!("dec.ca{s}.wk"))?,
                    wv: self.bind_one(g, &mut tr, &format!("dec.ca{s}.wv"))?,
                }))
            } else {
                cross.push(None);
            }
        }
        let head = MaskHeadNodes {
            up1: self.bind_one(g, &mut tr, "dec.up1.w")?,
            up1_bias: self.bind_one(g, &mut tr, "dec.up1.b")?,
            up2: self.bind_one(g, &mut tr, "dec.up2.w")?,
            up2_bias: self.bind_one(g, &mut tr, "dec.up2.b")?,
            mlp_w1: self.bind_one(g, &mut tr, "dec.mlp.w1")?,
            mlp_b1: self.bind_one(g, &mut tr, "dec.mlp.b1")?,
            mlp_w2: self.bind_one(g, &mut tr, "dec.mlp.w2")?,
            mlp_b2: self.bind_one(g, &mut tr, "dec.mlp.b2")?,
        };
        Ok(Bound {
            trainable: tr,
            patch_w,
            pos_embed,
            blocks,
            gkp,
            point_embed,
            queries,
            self_attn,
            cross,
            head,
        })
    }

    /// End-to-end forward pass to per-pixel probabilities `[C,H,W]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        image: &Tensor,
        points: &PointPromptSet,
    ) -> Result<NodeId> {
        let (_, h, w) = image.dims3()?;
        if h != self.cfg.size || w != self.cfg.size {
            return Err(Error::Config(format!(
                "image {h}x{w} does not match configured size {}",
                self.cfg.size
            )));
        }
        // per-image standardization bounds the appearance shift the frozen
        // encoder sees across acquisition domains
        let image = standardize(image)?;
        let grid =
            encoder::encode_image(g, &image, bound.patch_w, bound.pos_embed, &bound.blocks)?;
        let p_sem = match &bound.gkp {
            Some(nodes) => {
                let density =
                    prompt::render_density(points, self.cfg.kernel_radius, self.cfg.sigma)?;
                Some(prompt::encode_semantic_prompt(g, &density, nodes)?)
            }
            None => None,
        };
        let p_pos = prompt::encode_position_prompt(g, points, &self.pos_encoder, bound.point_embed)?;
        let q_updated = match &bound.self_attn {
            Some(sa) => decoder::decoder_self_attention(g, bound.queries, p_pos, sa)?,
            None => {
                if points.is_empty() {
                    bound.queries
                } else {
                    g.concat_rows(bound.queries, p_pos)?
                }
            }
        };
        let fused = decoder::fuse_embeddings(g, grid, p_sem)?;
        let gh = self.cfg.grid();
        let psi = g.input(self.pos_encoder.encode_grid(gh, gh));
        let proj: Vec<Option<&CrossAttnNodes>> = bound.cross.iter().map(|c| c.as_ref()).collect();
        let decoded =
            decoder::decoder_cross_attention(g, fused, q_updated, psi, &proj, bound.cross.len())?;
        decoder::predict_mask(
            g,
            decoded,
            q_updated,
            self.cfg.categories,
            (gh, gh),
            (h, w),
            &bound.head,
        )
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.cfg.alpha,
            beta: self.cfg.beta,
            gamma: self.cfg.gamma,
            dice_eps: self.cfg.dice_eps,
        }
    }

    /// Forward plus supervision against a binary target `[C,H,W]`.
    pub fn forward_loss(
        &self,
        g: &mut Graph,
        bound: &Bound,
        image: &Tensor,
        points: &PointPromptSet,
        target: &Tensor,
    ) -> Result<NodeId> {
        let probs = self.forward(g, bound, image, points)?;
        let t = g.input(target.clone());
        decoder::loss_sem(g, probs, t, &self.loss_weights())
    }

    /// Inference: probabilities wrapped with the configured threshold.
    pub fn predict(&self, image: &Tensor, points: &PointPromptSet) -> Result<SemanticMask> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let probs = self.forward(&mut g, &bound, image, points)?;
        Ok(SemanticMask {
            probs: g.value(probs).clone(),
            threshold: self.cfg.tau,
        })
    }

    /// Deterministic semantic-to-instance conversion: threshold, label
    /// 8-connected components, split touching instances at distance peaks.
    pub fn to_instances(&self, mask: &SemanticMask) -> Result<InstanceMap> {
        let binary = mask.binary_union()?;
        let cc = connected_components(&binary)?;
        split_touching(&cc, mask, self.cfg.split_separation())
    }

    /// Binary training target from a ground-truth instance map.
    pub fn target_from_instances(&self, inst: &InstanceMap) -> Result<Tensor> {
        if self.cfg.categories != 1 {
            return Err(Error::Config(
                "synthetic ground truth is single-category; set categories = 1".into(),
            ));
        }
        let (h, w) = (inst.height(), inst.width());
        Ok(Tensor::from_fn(&[1, h, w], |i| {
            f64::from(inst.labels()[i] != 0)
        }))
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn frozen_hash(&self) -> u64 {
        self.store.frozen_hash()
    }

    /// Write all weights (frozen and trainable) as a v1 checkpoint.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.store.save(path)
    }

    /// Load a checkpoint into a model built from `cfg`. Every tensor the
    /// config implies must be present with a matching shape, and the
    /// checkpoint may not carry extras; mismatches are config errors.
    pub fn load(cfg: &RunConfig, path: &std::path::Path) -> Result<Model> {
        let mut model = Model::init(cfg)?;
        let loaded = ParamStore::load(path)?;
        let expected: Vec<String> = model.store.names().map(String::from).collect();
        for name in loaded.names() {
            if !model.store.contains(name) {
                return Err(Error::Config(format!(
                    "checkpoint tensor '{name}' does not fit this configuration"
                )));
            }
        }
        for name in &expected {
            let incoming = loaded.get(name).map_err(|_| {
                Error::Config(format!("checkpoint is missing tensor '{name}'"))
            })?;
            let current = model.store.get(name)?;
            if incoming.shape() != current.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor '{name}' has shape {:?}, config implies {:?}",
                    incoming.shape(),
                    current.shape()
                )));
            }
            let trainable = model.store.is_trainable(name);
            model.store.insert(name, incoming.clone(), trainable);
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::AdapterParams;
    use crate::synth::{builtin_styles, generate_domain};

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.size = 32;
        cfg.dim = 16;
        cfg.prompt_dim = 16;
        cfg.heads = 2;
        cfg.blocks = 1;
        cfg.images_per_domain = 1;
        cfg
    }

    /// Built-in styles target 64x64 canvases; shrink for 32x32 tests.
    fn small_style(idx: usize) -> crate::synth::DomainStyle {
        let mut style = builtin_styles()[idx].clone();
        style.count = (2, 3);
        style.radius = (2.5, 4.0);
        style
    }

    #[test]
    fn init_and_predict_shapes() {
        let cfg = small_cfg();
        let model = Model::init(&cfg).unwrap();
        let d = generate_domain(&small_style(0), 1, 32, 0).unwrap();
        let s = &d.samples[0];
        let mask = model.predict(&s.image, &s.points).unwrap();
        assert_eq!(mask.probs.shape(), &[1, 32, 32]);
        for v in mask.probs.data() {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn predict_is_deterministic() {
        let cfg = small_cfg();
        let model = Model::init(&cfg).unwrap();
        let d = generate_domain(&small_style(1), 1, 32, 1).unwrap();
        let s = &d.samples[0];
        let a = model.predict(&s.image, &s.points).unwrap();
        let b = model.predict(&s.image, &s.points).unwrap();
        assert!(a.probs.bits_eq(&b.probs));
    }

    #[test]
    fn adapter_parameter_count_matches_formula() {
        let cfg = small_cfg();
        let model = Model::init(&cfg).unwrap();
        let dims = cfg.space_dims().unwrap();
        let per_block = AdapterParams::parameter_count(cfg.dim, &dims, cfg.n_spaces);
        let adapter_total: usize = (0..cfg.blocks)
            .map(|b| {
                model
                    .store
                    .trainable_count_prefix(&format!("enc.b{b}.adapter."))
            })
            .sum();
        assert_eq!(adapter_total, per_block * cfg.blocks);
    }

    #[test]
    fn toggles_change_trainable_count_distinctly() {
        let mut counts = std::collections::HashSet::new();
        for mask in 0..8u8 {
            let mut cfg = small_cfg();
            cfg.hs_adapter = mask & 1 != 0;
            cfg.gkp_encoder = mask & 2 != 0;
            cfg.tsm_decoder = mask & 4 != 0;
            let model = Model::init(&cfg).unwrap();
            assert!(counts.insert(model.trainable_parameter_count()));
        }
    }

    #[test]
    fn zero_adapter_matches_disabled_adapter_bitwise() {
        let cfg = small_cfg();
        let mut with_adapter = Model::init(&cfg).unwrap();
        // zero every adapter tensor (down-projections start random)
        let names: Vec<String> = with_adapter
            .store
            .names()
            .filter(|n| n.contains(".adapter."))
            .map(String::from)
            .collect();
        for n in names {
            let t = with_adapter.store.get_mut(&n).unwrap();
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let mut cfg_off = cfg.clone();
        cfg_off.hs_adapter = false;
        let without = Model::init(&cfg_off).unwrap();

        let d = generate_domain(&small_style(2), 1, 32, 5).unwrap();
        let s = &d.samples[0];
        // compare the encoder grids bitwise
        let run = |model: &Model| {
            let mut g = Graph::new();
            let bound = model.bind(&mut g).unwrap();
            let grid = encoder::encode_image(
                &mut g,
                &s.image,
                bound.patch_w,
                bound.pos_embed,
                &bound.blocks,
            )
            .unwrap();
            g.value(grid).clone()
        };
        assert!(run(&with_adapter).bits_eq(&run(&without)));
    }

    #[test]
    fn forward_loss_is_finite_and_positive() {
        let cfg = small_cfg();
        let model = Model::init(&cfg).unwrap();
        let d = generate_domain(&small_style(0), 1, 32, 2).unwrap();
        let s = &d.samples[0];
        let target = model.target_from_instances(&s.instances).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g).unwrap();
        let loss = model
            .forward_loss(&mut g, &bound, &s.image, &s.points, &target)
            .unwrap();
        let v = g.value(loss).item().unwrap();
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn checkpoint_save_load_round_trip() {
        let cfg = small_cfg();
        let model = Model::init(&cfg).unwrap();
        let dir = std::env::temp_dir().join("nucseg_model_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        model.save(&path).unwrap();
        let loaded = Model::load(&cfg, &path).unwrap();
        assert_eq!(loaded.frozen_hash(), model.frozen_hash());
        let d = generate_domain(&small_style(0), 1, 32, 9).unwrap();
        let s = &d.samples[0];
        let a = model.predict(&s.image, &s.points).unwrap();
        let b = loaded.predict(&s.image, &s.points).unwrap();
        assert!(a.probs.bits_eq(&b.probs));
        // wrong dims are a config error
        let mut other = small_cfg();
        other.dim = 32;
        other.prompt_dim = 32;
        assert!(matches!(Model::load(&other, &path), Err(Error::Config(_))));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn image_size_mismatch_is_config_error() {
        let cfg = small_cfg();
        let model = Model::init(&cfg).unwrap();
        let d = generate_domain(&builtin_styles()[0], 1, 64, 0).unwrap();
        let s = &d.samples[0];
        let mut g = Graph::new();
        let bound = model.bind(&mut g).unwrap();
        assert!(matches!(
            model.forward(&mut g, &bound, &s.image, &s.points),
            Err(Error::Config(_))
        ));
    }
}
