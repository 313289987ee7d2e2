//! Conv4 embedding and class prototypes.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvBnRelu, Ctx};
use crate::optim::ParamStore;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const CONV4_BLOCKS: usize = 4;

/// Four `[conv3×3 pad 1 → BN → ReLU → maxpool 2×2]` blocks of equal width.
#[derive(Debug, Clone)]
pub struct Conv4 {
    pub blocks: Vec<ConvBnRelu>,
    pub in_channels: usize,
    pub image_size: usize,
    pub width: usize,
}

/// Spatial extent after the four pooling stages (floor division).
pub fn conv4_output_size(image_size: usize) -> usize {
    (0..CONV4_BLOCKS).fold(image_size, |s, _| s / 2)
}

impl Conv4 {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        in_channels: usize,
        image_size: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..CONV4_BLOCKS)
            .map(|i| {
                let in_c = if i == 0 { in_channels } else { width };
                ConvBnRelu::new(store, &format!("backbone.{i}"), in_c, width, rng)
            })
            .collect();
        Conv4 {
            blocks,
            in_channels,
            image_size,
            width,
        }
    }

    /// `[c, h, w]` of one embedded image.
    pub fn feature_shape(&self) -> [usize; 3] {
        let s = conv4_output_size(self.image_size);
        [self.width, s, s]
    }

    /// Embeds `x: [B, C, S, S]` into `[B, width, s, s]`.
    pub fn embed<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let shape = ctx.g.shape(x);
        let want = [self.in_channels, self.image_size, self.image_size];
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::contract(format!(
                "embed expects [B, {}, {}, {}] input, got {:?}",
                want[0], want[1], want[2], shape
            )));
        }
        if conv4_output_size(self.image_size) == 0 {
            return Err(Error::contract(format!("image size {} too small for Conv4", self.image_size)));
        }
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(ctx, h);
            h = ctx.g.max_pool2(h);
        }
        Ok(h)
    }
}

/// Per-class mean of embedded supports: `features: [n_s, ...]` with
/// `labels[i] ∈ [0, ways)` gives `[ways, ...]`.
pub fn build_prototypes<T: Scalar>(g: &mut Graph<T>, features: Var, labels: &[usize], ways: usize) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    if shape[0] != labels.len() {
        return Err(Error::contract(format!(
            "{} support features but {} labels",
            shape[0],
            labels.len()
        )));
    }
    let mut counts = vec![0usize; ways];
    for &l in labels {
        if l >= ways {
            return Err(Error::contract(format!("support label {l} outside [0, {ways})")));
        }
        counts[l] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::contract(format!("class {missing} has no support sample")));
    }
    let n = labels.len();
    let mut avg = vec![T::zero(); ways * n];
    for (i, &l) in labels.iter().enumerate() {
        avg[l * n + i] = lit(1.0 / counts[l] as f64);
    }
    let a = g.constant(Tensor::from_vec(&[ways, n], avg));
    let flat_width: usize = shape[1..].iter().product();
    let flat = g.reshape(features, &[n, flat_width]);
    let means = g.matmul(a, flat);
    let mut out_shape = shape;
    out_shape[0] = ways;
    Ok(g.reshape(means, &out_shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(size: usize) -> (ParamStore<f64>, Conv4) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Conv4::new(&mut store, 3, size, 8, &mut rng);
        (store, net)
    }

    #[test]
    fn output_sizes() {
        assert_eq!(conv4_output_size(32), 2);
        assert_eq!(conv4_output_size(84), 5);
    }

    #[test]
    fn embed_shape_32() {
        let (store, net) = model(32);
        let mut ctx = Ctx::new(&store, false);
        let x = ctx.g.constant(Tensor::full(&[1, 3, 32, 32], 0.3));
        let y = net.embed(&mut ctx, x).unwrap();
        assert_eq!(ctx.g.shape(y), &[1, 8, 2, 2]);
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let (store, net) = model(32);
        let mut ctx = Ctx::new(&store, false);
        let x = ctx.g.constant(Tensor::zeros(&[1, 3, 28, 28]));
        assert!(matches!(net.embed(&mut ctx, x), Err(Error::Contract(_))));
    }

    #[test]
    fn eval_embedding_is_deterministic() {
        let (store, net) = model(32);
        let img: Vec<f64> = (0..3 * 32 * 32).map(|i| ((i * 37) % 101) as f64 / 50.0 - 1.0).collect();
        let mut twice = img.clone();
        twice.extend_from_slice(&img);
        let mut ctx = Ctx::new(&store, false);
        let x = ctx.g.constant(Tensor::from_vec(&[2, 3, 32, 32], twice));
        let y = net.embed(&mut ctx, x).unwrap();
        let d = ctx.g.value(y).data();
        let half = d.len() / 2;
        assert_eq!(&d[..half], &d[half..]);
    }

    #[test]
    fn single_shot_prototype_is_the_support() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::from_f64(&[2, 1, 1, 2], &[1., 2., 3., 4.]));
        let p = build_prototypes(&mut g, f, &[1, 0], 2).unwrap();
        assert_eq!(g.value(p).data(), &[3., 4., 1., 2.]);
    }

    #[test]
    fn opposite_supports_cancel() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::from_f64(&[2, 2], &[1.5, -2., -1.5, 2.]));
        let p = build_prototypes(&mut g, f, &[0, 0], 1).unwrap();
        assert_eq!(g.value(p).data(), &[0., 0.]);
    }

    #[test]
    fn missing_class_is_named() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::zeros(&[2, 2]));
        let err = build_prototypes(&mut g, f, &[0, 2], 3).unwrap_err();
        assert!(err.to_string().contains("class 1"));
    }
}
