//! Every trainable tensor of the model lives in one flat name -> Tensor
//! registry. The optimizer, gradient checker, and checkpoint all walk that
//! registry in lexicographic name order, which makes serialization and
//! accumulation order deterministic by construction.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Result, TcpnError};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width, encoder base channels, decoder state size in one.
    pub d: usize,
    /// Down/up stages when the grid path is on; plain block count otherwise.
    pub depth: usize,
    pub use_coord: bool,
    pub use_unet: bool,
    pub use_residual: bool,
    pub vocab_size: usize,
    /// K real categories; class 0 is background.
    pub num_categories: usize,
    /// Decode step cap per field.
    pub max_len: usize,
}

impl ModelConfig {
    pub fn class_count(&self) -> usize {
        self.num_categories + 1
    }

    pub fn stem_in_channels(&self) -> usize {
        if self.use_coord {
            self.d + 2
        } else {
            self.d
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 4 {
            return Err(TcpnError::Config(format!("model d must be >= 4, got {}", self.d)));
        }
        if self.depth < 1 {
            return Err(TcpnError::Config(format!("depth must be >= 1, got {}", self.depth)));
        }
        if self.vocab_size < 3 {
            return Err(TcpnError::Config("vocabulary must include the reserved ids".into()));
        }
        if self.num_categories < 1 {
            return Err(TcpnError::Config("at least one category required".into()));
        }
        if self.max_len < 1 {
            return Err(TcpnError::Config("max_len must be >= 1".into()));
        }
        Ok(())
    }
}

pub const TOKEN_EMBED: &str = "embed.token";
pub const CLASS_EMBED: &str = "embed.class";
pub const FINAL_CONV_W: &str = "enc.zfinal.w";
pub const FINAL_CONV_B: &str = "enc.zfinal.b";

pub fn res_block_names(prefix: &str) -> [String; 8] {
    [
        format!("{}.conv1.w", prefix),
        format!("{}.conv1.b", prefix),
        format!("{}.ss1.g", prefix),
        format!("{}.ss1.b", prefix),
        format!("{}.conv2.w", prefix),
        format!("{}.conv2.b", prefix),
        format!("{}.ss2.g", prefix),
        format!("{}.ss2.b", prefix),
    ]
}

pub struct ModelParams {
    pub cfg: ModelConfig,
    table: BTreeMap<String, Tensor>,
}

/// The registry leafed into one Graph: same names, NodeIds instead of values.
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {:?}", name))
    }
}

impl ModelParams {
    pub fn init<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<ModelParams> {
        cfg.validate()?;
        let d = cfg.d;
        let mut table = BTreeMap::new();
        let put = |t: &mut BTreeMap<String, Tensor>, name: String, v: Tensor| {
            let prev = t.insert(name.clone(), v);
            assert!(prev.is_none(), "parameter {:?} initialized twice", name);
        };

        // Embeddings: small uniform, pad row pinned to zero.
        let mut tok = Tensor::uniform(&[cfg.vocab_size, d], -0.1, 0.1, rng);
        tok.data_mut()[..d].iter_mut().for_each(|v| *v = 0.0);
        put(&mut table, TOKEN_EMBED.into(), tok);
        put(
            &mut table,
            CLASS_EMBED.into(),
            Tensor::uniform(&[cfg.class_count(), d], -0.1, 0.1, rng),
        );

        let conv = |rng: &mut R, kh: usize, kw: usize, ci: usize, co: usize| {
            Tensor::glorot(&[kh, kw, ci, co], kh * kw * ci, kh * kw * co, rng)
        };
        let res_block = |t: &mut BTreeMap<String, Tensor>, rng: &mut R, prefix: &str, c: usize| {
            let [c1w, c1b, s1g, s1b, c2w, c2b, s2g, s2b] = res_block_names(prefix);
            put(t, c1w, conv(rng, 3, 3, c, c));
            put(t, c1b, Tensor::zeros(&[c]));
            put(t, s1g, Tensor::full(&[c], 1.0));
            put(t, s1b, Tensor::zeros(&[c]));
            put(t, c2w, conv(rng, 3, 3, c, c));
            put(t, c2b, Tensor::zeros(&[c]));
            put(t, s2g, Tensor::full(&[c], 1.0));
            put(t, s2b, Tensor::zeros(&[c]));
        };

        put(&mut table, "enc.stem.w".into(), conv(rng, 3, 3, cfg.stem_in_channels(), d));
        put(&mut table, "enc.stem.b".into(), Tensor::zeros(&[d]));
        if cfg.use_unet {
            for s in 0..cfg.depth {
                let c = d << s;
                res_block(&mut table, rng, &format!("enc.down{}", s), c);
                put(&mut table, format!("enc.pool{}.w", s), conv(rng, 3, 3, c, 2 * c));
                put(&mut table, format!("enc.pool{}.b", s), Tensor::zeros(&[2 * c]));
            }
            res_block(&mut table, rng, "enc.bottom", d << cfg.depth);
            for s in 0..cfg.depth {
                let c = d << s;
                put(
                    &mut table,
                    format!("enc.up{}.merge.w", s),
                    conv(rng, 1, 1, 2 * c + c, c),
                );
                put(&mut table, format!("enc.up{}.merge.b", s), Tensor::zeros(&[c]));
                res_block(&mut table, rng, &format!("enc.up{}", s), c);
            }
        } else {
            for s in 0..cfg.depth {
                res_block(&mut table, rng, &format!("enc.block{}", s), d);
            }
        }
        // Zero-initialized output projection: training starts from the
        // identity-plus-nothing residual.
        put(&mut table, FINAL_CONV_W.into(), Tensor::zeros(&[1, 1, d, d]));
        put(&mut table, FINAL_CONV_B.into(), Tensor::zeros(&[d]));

        let h = d;
        let lin = |rng: &mut R, out: usize, inp: usize| Tensor::glorot(&[out, inp], inp, out, rng);
        put(&mut table, "dec.s0".into(), Tensor::zeros(&[1, h]));
        for gate in ["wz", "wr", "wh"] {
            put(&mut table, format!("dec.gru.{}", gate), lin(rng, h, 2 * d + h));
        }
        for gate in ["bz", "br", "bh"] {
            put(&mut table, format!("dec.gru.{}", gate), Tensor::zeros(&[h]));
        }
        let a = d;
        put(&mut table, "dec.att.w1".into(), lin(rng, a, d));
        put(&mut table, "dec.att.w2".into(), lin(rng, a, d));
        put(&mut table, "dec.att.w3".into(), lin(rng, a, h));
        put(&mut table, "dec.att.b1".into(), Tensor::zeros(&[a]));
        let we = lin(rng, 1, a);
        // Coverage starts repulsive: in the linear regime of the score tanh,
        // one unit of coverage costs about one unit of score, so a position
        // already attended to loses ties against a fresh duplicate of the
        // same character. Training is free to reshape the scale.
        let norm2: f64 = we.data().iter().map(|v| v * v).sum::<f64>().max(1e-12);
        let w4 = Tensor::from_vec(&[a, 1], we.data().iter().map(|v| -v / norm2).collect());
        put(&mut table, "dec.att.w4".into(), w4);
        put(&mut table, "dec.att.we".into(), we);
        put(&mut table, "dec.pred.w".into(), lin(rng, cfg.vocab_size, d + h));
        put(&mut table, "dec.pred.b".into(), Tensor::zeros(&[cfg.vocab_size]));
        put(&mut table, "dec.copy.w6".into(), lin(rng, 1, d));
        put(&mut table, "dec.copy.w7".into(), lin(rng, 1, h));
        put(&mut table, "dec.copy.w8".into(), lin(rng, 1, d));
        // Gate starts open (sigma(1) ~ 0.73): copy supervision reaches the
        // label head from the first epoch; data can still close it.
        put(&mut table, "dec.copy.b".into(), Tensor::from_vec(&[1], vec![2.0]));
        put(&mut table, "head.w".into(), lin(rng, cfg.class_count(), d));
        put(&mut table, "head.b".into(), Tensor::zeros(&[cfg.class_count()]));

        Ok(ModelParams { cfg, table })
    }

    pub fn from_table(cfg: ModelConfig, table: BTreeMap<String, Tensor>) -> ModelParams {
        ModelParams { cfg, table }
    }

    pub fn param(&self, name: &str) -> &Tensor {
        self.table
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {:?}", name))
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        self.table
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {:?}", name))
    }

    /// Lexicographic (name, tensor) walk: the canonical ordering everywhere.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.table.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.table.keys().cloned().collect()
    }

    pub fn num_tensors(&self) -> usize {
        self.table.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.table.values().map(|t| t.numel()).sum()
    }

    /// Leafs every parameter into the graph.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let ids = self
            .table
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone())))
            .collect();
        Bound { ids }
    }

    /// Pairs externally created leaf ids with parameter names, in the same
    /// lexicographic order as `iter`. Used by the gradient checker, which
    /// owns the leaves.
    pub fn bind_ids(&self, ids: &[NodeId]) -> Bound {
        assert_eq!(ids.len(), self.table.len(), "id count does not match parameter count");
        Bound {
            ids: self
                .table
                .keys()
                .cloned()
                .zip(ids.iter().copied())
                .collect(),
        }
    }

    /// Accumulated gradients per parameter after a backward pass, zeros for
    /// parameters the loss never touched.
    pub fn collect_grads(&self, g: &Graph, bound: &Bound) -> BTreeMap<String, Tensor> {
        self.table
            .iter()
            .map(|(name, t)| {
                let grad = g
                    .grad(bound.id(name))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.clone(), grad)
            })
            .collect()
    }
}
