#![allow(dead_code)]

use pivotvae::backbone::{BackboneDims, BackboneModel};
use pivotvae::config::BackboneMode;
use pivotvae::corpus::{Batch, Sentence};
use pivotvae::nn::{attention_mask, Binding, BlockDims, MultiHeadAttention, ParamStore, SeqShape, TransformerStack};
use pivotvae::rng::rng_from_seed;
use pivotvae::tensor::gradcheck::{finite_diff_check, random_projection, GradCheckOptions};
use pivotvae::tensor::{Graph, Tensor, Var};
use pivotvae::trainer::{batch_features, stage1_loss, Models};
use pivotvae::vae::{LossWeights, StyleEmbeddingTable, VaeDims, VaeModel};
use pivotvae::Result;

pub const OP_TOL: f32 = 1e-3;
pub const E2E_TOL: f32 = 1e-2;

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng_from_seed(seed))
}

fn proj(g: &mut Graph, x: Var) -> Result<Var> {
    random_projection(g, x, 99)
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn case(name: &str, inputs: Vec<(&'static str, Tensor)>, f: Build) -> (String, Vec<(&'static str, Tensor)>, Build) {
    (name.to_string(), inputs, f)
}

/// Max relative finite-difference error of every graph op, by name.
pub fn op_errors() -> Vec<(String, f32)> {
    let a34 = randn(&[3, 4], 5);
    let b4 = randn(&[4], 6);
    let a234 = randn(&[2, 3, 4], 14);
    let x25 = randn(&[2, 5], 7);
    let h = 3;
    let mut cases: Vec<(String, Vec<(&'static str, Tensor)>, Build)> = vec![
        case("matmul", vec![("a", randn(&[3, 4], 1)), ("b", randn(&[4, 2], 2))], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            proj(g, y)
        })),
        case("matmul_rank3", vec![("a", a234.clone()), ("b", randn(&[4, 2], 2))], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            proj(g, y)
        })),
        case("batch_matmul", vec![("a", a234.clone()), ("b", randn(&[2, 4, 5], 4))], Box::new(|g, v| {
            let y = g.batch_matmul(v[0], v[1], false)?;
            proj(g, y)
        })),
        case("batch_matmul_nt", vec![("a", a234.clone()), ("b", randn(&[2, 5, 4], 4))], Box::new(|g, v| {
            let y = g.batch_matmul(v[0], v[1], true)?;
            proj(g, y)
        })),
        case("add", vec![("a", a34.clone()), ("b", b4.clone())], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            proj(g, y)
        })),
        case("sub", vec![("a", a34.clone()), ("b", b4.clone())], Box::new(|g, v| {
            let y = g.sub(v[0], v[1])?;
            proj(g, y)
        })),
        case("mul", vec![("a", a34.clone()), ("b", b4.clone())], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            proj(g, y)
        })),
        case("mul_scalar", vec![("a", a34.clone()), ("b", Tensor::scalar(0.7))], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            proj(g, y)
        })),
    ];
    let unary: [(&str, fn(&mut Graph, Var) -> Var); 7] = [
        ("scale", |g, x| g.scale(x, -1.7)),
        ("add_scalar", |g, x| g.add_scalar(x, 0.3)),
        ("gelu", |g, x| g.gelu(x)),
        ("tanh", |g, x| g.tanh(x)),
        ("sigmoid", |g, x| g.sigmoid(x)),
        ("exp", |g, x| g.exp(x)),
        ("log_sigmoid", |g, x| g.log_sigmoid(x)),
    ];
    for (name, f) in unary {
        cases.push(case(name, vec![("x", x25.clone())], Box::new(move |g, v| {
            let y = f(g, v[0]);
            proj(g, y)
        })));
    }
    for axis in 0..3 {
        cases.push(case(&format!("softmax_axis{axis}"), vec![("x", randn(&[2, 3, 4], 8))], Box::new(move |g, v| {
            let y = g.softmax(v[0], axis)?;
            proj(g, y)
        })));
    }
    cases.extend([
        case(
            "layer_norm",
            vec![("x", randn(&[3, 6], 9)), ("gamma", randn(&[6], 10)), ("beta", randn(&[6], 11))],
            Box::new(|g, v| {
                let y = g.layer_norm(v[0], v[1], v[2])?;
                proj(g, y)
            }),
        ),
        case("embedding", vec![("table", randn(&[5, 3], 12))], Box::new(|g, v| {
            let y = g.embedding(v[0], &[4, 0, 4, 2])?;
            proj(g, y)
        })),
        case("cross_entropy", vec![("logits", randn(&[4, 6], 13))], Box::new(|g, v| {
            g.cross_entropy(v[0], &[Some(1), None, Some(5), Some(0)])
        })),
        case("concat", vec![("a", a234.clone()), ("b", randn(&[2, 2, 4], 15))], Box::new(|g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            proj(g, y)
        })),
        case("slice", vec![("a", a234.clone())], Box::new(|g, v| {
            let y = g.slice(v[0], 2, 1, 2)?;
            proj(g, y)
        })),
        case("permute", vec![("a", a234.clone())], Box::new(|g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            proj(g, y)
        })),
        case("gather_rows", vec![("a", a234.clone())], Box::new(|g, v| {
            let y = g.gather_rows(v[0], &[5, 0, 5, 3])?;
            proj(g, y)
        })),
        case("reshape", vec![("a", a234.clone())], Box::new(|g, v| {
            let y = g.reshape(v[0], &[6, 4])?;
            proj(g, y)
        })),
        case("expand_rows", vec![("a", randn(&[3, 4], 16))], Box::new(|g, v| {
            let y = g.expand_rows(v[0], 3)?;
            proj(g, y)
        })),
        case("masked_mean_pool", vec![("a", a234)], Box::new(|g, v| {
            let y = g.masked_mean_pool(v[0], &[true, false, true, true, true, false])?;
            proj(g, y)
        })),
        case("sum", vec![("a", randn(&[3, 4], 17))], Box::new(|g, v| {
            let y = g.exp(v[0]);
            Ok(g.sum(y))
        })),
        case("mean", vec![("a", randn(&[3, 4], 18))], Box::new(|g, v| {
            let y = g.tanh(v[0]);
            Ok(g.mean(y))
        })),
        case("row_cosine", vec![("a", randn(&[3, 5], 19)), ("b", randn(&[3, 5], 20))], Box::new(|g, v| {
            let y = g.row_cosine(v[0], v[1])?;
            proj(g, y)
        })),
        case(
            "lstm_cell",
            vec![
                ("x", randn(&[2, 4], 22)),
                ("h", randn(&[2, h], 23)),
                ("c", randn(&[2, h], 24)),
                ("w", Tensor::randn(&[4 + h, 4 * h], 0.5, &mut rng_from_seed(25))),
            ],
            Box::new(move |g, v| {
                let xh = g.concat(&[v[0], v[1]], 1)?;
                let z = g.matmul(xh, v[3])?;
                let i = g.slice(z, 1, 0, h)?;
                let f = g.slice(z, 1, h, h)?;
                let o = g.slice(z, 1, 2 * h, h)?;
                let u = g.slice(z, 1, 3 * h, h)?;
                let (i, f, o, u) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o), g.tanh(u));
                let fc = g.mul(f, v[2])?;
                let iu = g.mul(i, u)?;
                let c = g.add(fc, iu)?;
                let tc = g.tanh(c);
                let hn = g.mul(o, tc)?;
                proj(g, hn)
            }),
        ),
    ]);
    cases
        .into_iter()
        .map(|(name, inputs, f)| {
            let report = finite_diff_check(&inputs, f, &GradCheckOptions::default()).unwrap();
            (name, report.max_rel_error())
        })
        .collect()
}

/// Central differences over sampled coordinates of every parameter in
/// `stores`. `loss` must return the scalar and, after its own backward pass,
/// the analytic gradients per store.
pub fn store_check<F>(stores: &mut [&mut ParamStore], coords_per_param: usize, loss: F) -> f32
where
    F: Fn(&mut Graph, &[&ParamStore]) -> Result<(Var, Vec<Vec<Vec<f32>>>)>,
{
    let eval = |stores: &[&ParamStore]| -> f64 {
        let mut g = Graph::new();
        let (l, _) = loss(&mut g, stores).unwrap();
        g.value(l).item() as f64
    };
    let analytic = {
        let ro: Vec<&ParamStore> = stores.iter().map(|s| &**s).collect();
        let mut g = Graph::new();
        loss(&mut g, &ro).unwrap().1
    };
    let step = 1e-2f32;
    let mut worst = 0.0f32;
    let mut rng = rng_from_seed(7);
    for si in 0..stores.len() {
        for pi in 0..stores[si].params().len() {
            let n = stores[si].params()[pi].value.numel();
            let picks = rand::seq::index::sample(&mut rng, n, coords_per_param.min(n));
            for j in picks {
                let base = stores[si].params().to_vec();
                let mut shifted = base.clone();
                let orig = base[pi].value.data()[j];
                shifted[pi].value.data_mut()[j] = orig + step;
                stores[si].load_from(&shifted).unwrap();
                let up = eval(&stores.iter().map(|s| &**s).collect::<Vec<_>>());
                shifted[pi].value.data_mut()[j] = orig - step;
                stores[si].load_from(&shifted).unwrap();
                let down = eval(&stores.iter().map(|s| &**s).collect::<Vec<_>>());
                stores[si].load_from(&base).unwrap();
                let num = ((up - down) / (2.0 * step as f64)) as f32;
                let a = analytic[si][pi][j];
                let err = (a - num).abs() / a.abs().max(num.abs()).max(0.1);
                worst = worst.max(err);
            }
        }
    }
    worst
}

fn bind_all(g: &mut Graph, stores: &[&ParamStore]) -> Vec<Binding> {
    stores.iter().map(|s| s.bind(g, true)).collect()
}

pub fn attention_error() -> f32 {
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, "attn", 8, 2, &mut rng_from_seed(30)).unwrap();
    let x = randn(&[2 * 3, 8], 31);
    let s = SeqShape { batch: 2, len: 3 };
    let pad = [false, false, false, false, false, true];
    store_check(&mut [&mut store], 6, |g, st| {
        let b = bind_all(g, st);
        let xv = g.constant(x.clone());
        let mask = g.constant(attention_mask(&pad, 2, 3, 2, true));
        let out = attn.forward(g, &b[0], xv, s, mask)?.out;
        let l = proj(g, out)?;
        g.backward(l)?;
        Ok((l, vec![st[0].grads(g, &b[0])]))
    })
}

pub fn transformer_stack_error() -> f32 {
    let mut store = ParamStore::new();
    let dims = BlockDims {
        d_model: 8,
        heads: 2,
        d_ff: 16,
    };
    let stack = TransformerStack::new(&mut store, "enc", 1, dims, &mut rng_from_seed(32)).unwrap();
    let x = randn(&[2 * 3, 8], 33);
    let s = SeqShape { batch: 2, len: 3 };
    let pad = [false; 6];
    store_check(&mut [&mut store], 4, |g, st| {
        let b = bind_all(g, st);
        let xv = g.constant(x.clone());
        let mask = g.constant(attention_mask(&pad, 2, 3, 2, false));
        let out = stack.forward(g, &b[0], xv, s, mask)?;
        let l = proj(g, out)?;
        g.backward(l)?;
        Ok((l, vec![st[0].grads(g, &b[0])]))
    })
}

pub fn tiny_models(mode: BackboneMode) -> (Models, Batch) {
    let mut rng = rng_from_seed(40);
    let vocab = 12;
    let backbone = BackboneModel::new(
        BackboneDims {
            mode,
            layers: 1,
            d_model: 8,
            heads: 2,
            ffn_dim: 16,
            vocab,
            max_len: 6,
        },
        &mut rng,
    )
    .unwrap();
    let vae = VaeModel::new(
        VaeDims {
            d_in: 8,
            d_model: 8,
            d_latent: 4,
            layers: 1,
            heads: 2,
            ffn_dim: 16,
            vocab,
            max_len: 6,
        },
        &mut rng,
    )
    .unwrap();
    let style = StyleEmbeddingTable::new(2, 4, 1.0, &mut rng);
    let sents = [
        Sentence {
            raw: "a b c".into(),
            tokens: vec![1, 5, 6, 7, 2],
            style: 0,
        },
        Sentence {
            raw: "d e".into(),
            tokens: vec![1, 8, 9, 2],
            style: 1,
        },
    ];
    let refs: Vec<&Sentence> = sents.iter().collect();
    let batch = Batch::from_sentences(&refs, vec![0, 1]).unwrap();
    (Models { backbone, vae, style }, batch)
}

/// Stage-I objective checked in two parts, since stop-gradients hide the
/// style table from the reconstruction and the encoder from the style
/// term: reconstruction + KL through the VAE and a trainable backbone, then
/// the style term through the style table.
pub fn stage1_loss_error(free_bits: f32) -> f32 {
    let (models, batch) = tiny_models(BackboneMode::Mlm);
    let eps = randn(&[2, 4], 41);
    let Models {
        mut backbone,
        mut vae,
        mut style,
    } = models;
    let (vae0, style0, bb0) = (vae.clone(), style.clone(), backbone.clone());
    let build = |m: &Models, g: &mut Graph, b: &[Binding], w: LossWeights| -> Result<Var> {
        let feats = batch_features(m, g, &b[2], &batch)?;
        Ok(stage1_loss(g, m, &b[0], &b[1], feats, &batch, eps.clone(), w, free_bits, false)?.total)
    };
    let vae_part = store_check(&mut [&mut vae.store, &mut backbone.store], 3, |g, st| {
        let mut m = Models {
            backbone: bb0.clone(),
            vae: vae0.clone(),
            style: style0.clone(),
        };
        m.vae.store = st[0].clone();
        m.backbone.store = st[1].clone();
        let b = vec![st[0].bind(g, true), style0.store.bind(g, false), st[1].bind(g, true)];
        let w = LossWeights { lambda_vae: 1.0, lambda_style: 0.0, beta: 1.0 };
        let l = build(&m, g, &b, w)?;
        g.backward(l)?;
        Ok((l, vec![st[0].grads(g, &b[0]), st[1].grads(g, &b[2])]))
    });
    let style_part = store_check(&mut [&mut style.store], 4, |g, st| {
        let mut m = Models {
            backbone: bb0.clone(),
            vae: vae0.clone(),
            style: style0.clone(),
        };
        m.style.store = st[0].clone();
        let b = vec![vae0.store.bind(g, false), st[0].bind(g, true), bb0.store.bind(g, false)];
        let w = LossWeights { lambda_vae: 0.0, lambda_style: 1.0, beta: 1.0 };
        let l = build(&m, g, &b, w)?;
        g.backward(l)?;
        Ok((l, vec![st[0].grads(g, &b[1])]))
    });
    vae_part.max(style_part)
}
