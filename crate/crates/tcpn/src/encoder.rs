//! Grid feature extractor. Token embeddings are scattered onto the lattice,
//! optional coordinate channels are appended, a residual conv backbone runs
//! over the grid (optionally with a downsample/upsample pyramid and skip
//! concats), the input embedding grid is added back, and the per-token rows
//! are gathered out in reading order.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::doc::Vocabulary;
use crate::lattice::LatticeLayout;
use crate::model::{res_block_names, Bound, ModelConfig, FINAL_CONV_B, FINAL_CONV_W, TOKEN_EMBED};

/// Two channels of linear position, each spanning -1..1 over its axis.
/// A singleton axis has no extent, so its channel is zero.
pub fn coord_channels(h: usize, w: usize) -> Tensor {
    assert!(h >= 1 && w >= 1, "coord_channels needs a nonempty grid");
    let ramp = |i: usize, n: usize| {
        if n == 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (n - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            data.push(ramp(j, w));
            data.push(ramp(i, h));
        }
    }
    Tensor::from_vec(&[h, w, 2], data)
}

/// Embedding grid I: zero background, the token's embedding row at each
/// placement cell.
pub fn scatter_embeddings(
    g: &mut Graph,
    bound: &Bound,
    layout: &LatticeLayout,
    vocab: &Vocabulary,
) -> NodeId {
    let ids: Vec<usize> = layout.placements.iter().map(|p| vocab.id(p.token)).collect();
    let rows = g.gather_rows(bound.id(TOKEN_EMBED), ids);
    let cells: Vec<(usize, usize)> = layout.placements.iter().map(|p| (p.row, p.col)).collect();
    g.scatter_rows(rows, cells, layout.height, layout.width)
}

fn res_block(g: &mut Graph, bound: &Bound, prefix: &str, x: NodeId) -> NodeId {
    let [c1w, c1b, s1g, s1b, c2w, c2b, s2g, s2b] = res_block_names(prefix);
    let mut y = g.conv2d(x, bound.id(&c1w), bound.id(&c1b), 1, 1);
    y = g.scale_shift(y, bound.id(&s1g), bound.id(&s1b));
    y = g.relu(y);
    y = g.conv2d(y, bound.id(&c2w), bound.id(&c2b), 1, 1);
    y = g.scale_shift(y, bound.id(&s2g), bound.id(&s2b));
    y = g.add(y, x);
    g.relu(y)
}

/// Runs the backbone over I ([H,W,d]) and returns the refined grid of the
/// same shape. Flags: `use_coord` appends the position channels before the
/// stem, `use_unet` switches between the pyramid and a flat block stack,
/// `use_residual` adds I back onto the network output.
pub fn encode(g: &mut Graph, bound: &Bound, cfg: &ModelConfig, i: NodeId) -> NodeId {
    let shape = g.shape(i).to_vec();
    assert_eq!(shape.len(), 3, "encode expects [H,W,d], got {:?}", shape);
    let (h, w, d) = (shape[0], shape[1], shape[2]);
    assert_eq!(d, cfg.d, "encode channel mismatch: grid {} vs config {}", d, cfg.d);

    let mut x = if cfg.use_coord {
        let coords = g.leaf(coord_channels(h, w));
        g.concat_last(i, coords)
    } else {
        i
    };

    let out = if cfg.use_unet {
        let m = 1 << cfg.depth;
        let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        if (hp, wp) != (h, w) {
            x = g.pad_hw(x, hp, wp);
        }
        x = g.conv2d(x, bound.id("enc.stem.w"), bound.id("enc.stem.b"), 1, 1);
        x = g.relu(x);
        let mut skips = Vec::with_capacity(cfg.depth);
        for s in 0..cfg.depth {
            x = res_block(g, bound, &format!("enc.down{}", s), x);
            skips.push(x);
            let (pw, pb) = (format!("enc.pool{}.w", s), format!("enc.pool{}.b", s));
            x = g.conv2d(x, bound.id(&pw), bound.id(&pb), 2, 1);
            x = g.relu(x);
        }
        x = res_block(g, bound, "enc.bottom", x);
        for s in (0..cfg.depth).rev() {
            x = g.upsample2x(x);
            x = g.concat_last(x, skips[s]);
            let (mw, mb) = (format!("enc.up{}.merge.w", s), format!("enc.up{}.merge.b", s));
            x = g.conv2d(x, bound.id(&mw), bound.id(&mb), 1, 0);
            x = g.relu(x);
            x = res_block(g, bound, &format!("enc.up{}", s), x);
        }
        x = g.conv2d(x, bound.id(FINAL_CONV_W), bound.id(FINAL_CONV_B), 1, 0);
        if (hp, wp) != (h, w) {
            x = g.crop_hw(x, h, w);
        }
        x
    } else {
        x = g.conv2d(x, bound.id("enc.stem.w"), bound.id("enc.stem.b"), 1, 1);
        x = g.relu(x);
        for s in 0..cfg.depth {
            x = res_block(g, bound, &format!("enc.block{}", s), x);
        }
        g.conv2d(x, bound.id(FINAL_CONV_W), bound.id(FINAL_CONV_B), 1, 0)
    };

    if cfg.use_residual {
        g.add(out, i)
    } else {
        out
    }
}

/// F: one feature row per placement, gathered at the placement cell, in the
/// layout's reading order. Every other grid cell is dropped here.
pub fn gather_token_features(g: &mut Graph, i_hat: NodeId, layout: &LatticeLayout) -> NodeId {
    let shape = g.shape(i_hat).to_vec();
    assert_eq!(
        (shape[0], shape[1]),
        (layout.height, layout.width),
        "grid {:?} does not match layout {}x{}",
        shape,
        layout.height,
        layout.width
    );
    let flat = g.reshape(i_hat, &[layout.height * layout.width, shape[2]]);
    let idx: Vec<usize> = layout
        .placements
        .iter()
        .map(|p| p.row * layout.width + p.col)
        .collect();
    g.gather_rows(flat, idx)
}

/// Scatter, encode, gather in one call: the per-document feature pipeline.
pub fn encode_document(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    layout: &LatticeLayout,
    vocab: &Vocabulary,
) -> NodeId {
    let i = scatter_embeddings(g, bound, layout, vocab);
    let i_hat = encode(g, bound, cfg, i);
    gather_token_features(g, i_hat, layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn coord_ramp_endpoints() {
        let c = coord_channels(1, 3);
        assert_eq!(c.shape(), &[1, 3, 2]);
        assert_eq!(c.data(), &[-1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let one = coord_channels(1, 1);
        assert_eq!(one.data(), &[0.0, 0.0]);
        let c2 = coord_channels(5, 7);
        let at = |i: usize, j: usize, ch: usize| c2.data()[(i * 7 + j) * 2 + ch];
        for (i, j) in [(0, 0), (0, 6), (4, 0), (4, 6)] {
            assert_eq!(at(i, j, 0).abs(), 1.0);
            assert_eq!(at(i, j, 1).abs(), 1.0);
        }
        assert_eq!(at(2, 3, 0), 0.0);
        assert_eq!(at(2, 3, 1), 0.0);
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d: 4,
            depth: 2,
            use_coord: true,
            use_unet: true,
            use_residual: true,
            vocab_size: 6,
            num_categories: 1,
            max_len: 4,
        }
    }

    fn tiny_vocab() -> Vocabulary {
        Vocabulary::from_entries(
            ["<pad>", "<unk>", "<eos>", "A", "B", "C"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap()
    }

    fn layout_of(cells: &[(char, usize, usize)], h: usize, w: usize) -> LatticeLayout {
        LatticeLayout {
            height: h,
            width: w,
            placements: cells
                .iter()
                .enumerate()
                .map(|(k, &(t, r, c))| crate::lattice::TokenPlacement {
                    token: t,
                    utterance_index: k,
                    offset: 0,
                    row: r,
                    col: c,
                })
                .collect(),
        }
    }

    #[test]
    fn scatter_places_embeddings_and_nothing_else() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(cfg, &mut ChaCha20Rng::seed_from_u64(3)).unwrap();
        let vocab = tiny_vocab();
        let layout = layout_of(&[('A', 0, 0), ('C', 1, 2)], 2, 3);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let i = scatter_embeddings(&mut g, &bound, &layout, &vocab);
        let grid = g.value(i);
        assert_eq!(grid.shape(), &[2, 3, 4]);
        let emb = params.param(TOKEN_EMBED);
        let row = |id: usize| &emb.data()[id * 4..(id + 1) * 4];
        let cell = |r: usize, c: usize| &grid.data()[(r * 3 + c) * 4..(r * 3 + c + 1) * 4];
        assert_eq!(cell(0, 0), row(vocab.id('A')));
        assert_eq!(cell(1, 2), row(vocab.id('C')));
        let nonzero = (0..2)
            .flat_map(|r| (0..3).map(move |c| (r, c)))
            .filter(|&(r, c)| cell(r, c).iter().any(|v| *v != 0.0))
            .count();
        assert_eq!(nonzero, 2);
    }

    #[test]
    fn zero_grid_encodes_to_zero_at_init() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(cfg, &mut ChaCha20Rng::seed_from_u64(4)).unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let i = g.leaf(Tensor::zeros(&[5, 9, 4]));
        let out = encode(&mut g, &bound, &cfg, i);
        assert_eq!(g.shape(out), &[5, 9, 4]);
        assert!(g.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encode_preserves_shape_for_awkward_dims() {
        let params = ModelParams::init(tiny_cfg(), &mut ChaCha20Rng::seed_from_u64(5)).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        for &(h, w) in &[(1, 1), (1, 17), (3, 5), (4, 4), (7, 2), (13, 11)] {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let i = g.leaf(Tensor::uniform(&[h, w, 4], -1.0, 1.0, &mut rng));
            let out = encode(&mut g, &bound, &tiny_cfg(), i);
            assert_eq!(g.shape(out), &[h, w, 4], "shape broken at {}x{}", h, w);
        }
    }

    #[test]
    fn every_ablation_flag_changes_the_function() {
        let base = tiny_cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let input = Tensor::uniform(&[6, 8, 4], -1.0, 1.0, &mut rng);
        let run = |cfg: ModelConfig| {
            // Independent param set per config (inventories differ), same seed
            // so shared tensors coincide; final conv randomized so the conv
            // path is live.
            let mut params = ModelParams::init(cfg, &mut ChaCha20Rng::seed_from_u64(8)).unwrap();
            *params.param_mut(FINAL_CONV_W) =
                Tensor::uniform(&[1, 1, 4, 4], -0.5, 0.5, &mut ChaCha20Rng::seed_from_u64(9));
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let i = g.leaf(input.clone());
            let out = encode(&mut g, &bound, &cfg, i);
            g.value(out).clone()
        };
        let reference = run(base);
        for (name, cfg) in [
            ("use_coord", ModelConfig { use_coord: false, ..base }),
            ("use_unet", ModelConfig { use_unet: false, ..base }),
            ("use_residual", ModelConfig { use_residual: false, ..base }),
        ] {
            assert_ne!(run(cfg), reference, "toggling {} is a no-op", name);
        }
    }

    #[test]
    fn features_at_init_equal_embeddings() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(cfg, &mut ChaCha20Rng::seed_from_u64(10)).unwrap();
        let vocab = tiny_vocab();
        let layout = layout_of(&[('B', 0, 1), ('A', 2, 0), ('C', 2, 3)], 3, 4);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let f = encode_document(&mut g, &bound, &cfg, &layout, &vocab);
        assert_eq!(g.shape(f), &[3, 4]);
        let emb = params.param(TOKEN_EMBED);
        for (k, p) in layout.placements.iter().enumerate() {
            let want = &emb.data()[vocab.id(p.token) * 4..(vocab.id(p.token) + 1) * 4];
            let got = &g.value(f).data()[k * 4..(k + 1) * 4];
            for (a, b) in got.iter().zip(want) {
                assert!(
                    (a - b).abs() < 1e-12,
                    "zero-initialized conv path must leave embeddings intact"
                );
            }
        }
    }

    #[test]
    fn gather_reads_exact_grid_rows() {
        let layout = layout_of(&[('A', 0, 2), ('B', 1, 0)], 2, 3);
        let mut g = Graph::new();
        let grid = g.leaf(Tensor::from_vec(
            &[2, 3, 2],
            (0..12).map(|v| v as f64).collect(),
        ));
        let f = gather_token_features(&mut g, grid, &layout);
        assert_eq!(g.value(f).data(), &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn interior_shift_is_equivariant_without_pyramid() {
        // Stride-2 pooling has no single-cell shift symmetry, so this checks
        // the flat stack; position channels off. Receptive radius for
        // depth 2 is 5 cells, tokens sit 8+ cells from every edge.
        let cfg = ModelConfig {
            use_coord: false,
            use_unet: false,
            use_residual: true,
            ..tiny_cfg()
        };
        let mut params = ModelParams::init(cfg, &mut ChaCha20Rng::seed_from_u64(11)).unwrap();
        *params.param_mut(FINAL_CONV_W) =
            Tensor::uniform(&[1, 1, 4, 4], -0.5, 0.5, &mut ChaCha20Rng::seed_from_u64(12));
        let vocab = tiny_vocab();
        let cells = [('A', 8, 9), ('B', 8, 11), ('C', 10, 9)];
        let shifted: Vec<(char, usize, usize)> =
            cells.iter().map(|&(t, r, c)| (t, r + 1, c + 1)).collect();
        let run = |cells: &[(char, usize, usize)]| {
            let layout = layout_of(cells, 24, 24);
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let f = encode_document(&mut g, &bound, &cfg, &layout, &vocab);
            g.value(f).clone()
        };
        let a = run(&cells);
        let b = run(&shifted);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5, "shift equivariance broken: {} vs {}", x, y);
        }
    }

    #[test]
    fn gradient_reaches_embeddings_via_both_paths() {
        let cfg = tiny_cfg();
        let mut params = ModelParams::init(cfg, &mut ChaCha20Rng::seed_from_u64(13)).unwrap();
        // Zero-init final conv would silence the conv path; randomize it.
        *params.param_mut(FINAL_CONV_W) =
            Tensor::uniform(&[1, 1, 4, 4], -0.5, 0.5, &mut ChaCha20Rng::seed_from_u64(14));
        let vocab = tiny_vocab();
        let layout = layout_of(&[('A', 1, 1), ('B', 3, 4)], 5, 6);

        let grad_norm = |cfg: ModelConfig| {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let f = encode_document(&mut g, &bound, &cfg, &layout, &vocab);
            let loss = g.sum(f);
            g.backward(loss);
            let gt = g.grad(bound.id(TOKEN_EMBED)).unwrap();
            gt.data().iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        let both = grad_norm(cfg);
        let conv_only = grad_norm(ModelConfig { use_residual: false, ..cfg });
        assert!(both > 0.0 && conv_only > 0.0);
        assert!(
            (both - conv_only).abs() > 1e-9,
            "residual path contributes no extra embedding gradient"
        );
    }
}
