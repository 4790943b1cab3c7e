use serde::{Deserialize, Serialize};

use super::layers::{softmax_ce, Cache, Layer, LayerSpec};
use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

/// Built-in architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    /// 784-300-100-10 fully connected with ReLU.
    #[serde(rename = "lenet-300-100")]
    Lenet300100,
    /// Caffe LeNet-5: conv(20,5×5) → pool → conv(50,5×5) → pool → fc500 → ReLU → fc10.
    #[serde(rename = "lenet-5")]
    Lenet5,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Lenet300100 => "lenet-300-100",
            ModelKind::Lenet5 => "lenet-5",
        }
    }

    pub fn build(&self, rng: &mut RngStream) -> Result<ModelGraph> {
        match self {
            ModelKind::Lenet300100 => lenet_300_100(rng),
            ModelKind::Lenet5 => lenet5(rng),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lenet-300-100" => Ok(ModelKind::Lenet300100),
            "lenet-5" => Ok(ModelKind::Lenet5),
            other => Err(Error::param(format!("unknown model `{other}`"))),
        }
    }
}

pub fn lenet_300_100(rng: &mut RngStream) -> Result<ModelGraph> {
    ModelGraph::new(
        &[1, 28, 28],
        vec![
            (
                "fc1".into(),
                LayerSpec::Dense {
                    inputs: 784,
                    outputs: 300,
                },
            ),
            ("relu1".into(), LayerSpec::Relu),
            (
                "fc2".into(),
                LayerSpec::Dense {
                    inputs: 300,
                    outputs: 100,
                },
            ),
            ("relu2".into(), LayerSpec::Relu),
            (
                "fc3".into(),
                LayerSpec::Dense {
                    inputs: 100,
                    outputs: 10,
                },
            ),
            ("loss".into(), LayerSpec::SoftmaxCe),
        ],
        rng,
    )
}

pub fn lenet5(rng: &mut RngStream) -> Result<ModelGraph> {
    let conv = |in_maps, out_maps| LayerSpec::Conv2d {
        in_maps,
        out_maps,
        kernel: 5,
        stride: 1,
        padding: 0,
    };
    let pool = LayerSpec::MaxPool {
        window: 2,
        stride: 2,
    };
    ModelGraph::new(
        &[1, 28, 28],
        vec![
            ("conv1".into(), conv(1, 20)),
            ("pool1".into(), pool.clone()),
            ("conv2".into(), conv(20, 50)),
            ("pool2".into(), pool),
            (
                "fc1".into(),
                LayerSpec::Dense {
                    inputs: 800,
                    outputs: 500,
                },
            ),
            ("relu1".into(), LayerSpec::Relu),
            (
                "fc2".into(),
                LayerSpec::Dense {
                    inputs: 500,
                    outputs: 10,
                },
            ),
            ("loss".into(), LayerSpec::SoftmaxCe),
        ],
        rng,
    )
}

/// Ordered layer list plus the loss head.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    forward_done: bool,
}

impl ModelGraph {
    /// Validates shapes end to end; the last layer must be `SoftmaxCe`.
    pub fn new(
        input_shape: &[usize],
        layers: Vec<(String, LayerSpec)>,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if !matches!(layers.last(), Some((_, LayerSpec::SoftmaxCe))) {
            return Err(Error::param("model must end with a softmax_ce layer"));
        }
        if layers[..layers.len() - 1]
            .iter()
            .any(|(_, s)| matches!(s, LayerSpec::SoftmaxCe))
        {
            return Err(Error::param("softmax_ce may only appear last"));
        }
        let mut shape = input_shape.to_vec();
        for (name, spec) in &layers {
            shape = spec
                .output_shape(&shape)
                .map_err(|e| Error::dim(format!("layer {name}: {e}")))?;
        }
        let mut names = std::collections::HashSet::new();
        for (name, _) in &layers {
            if !names.insert(name.clone()) {
                return Err(Error::param(format!("duplicate layer name `{name}`")));
            }
        }
        Ok(ModelGraph {
            input_shape: input_shape.to_vec(),
            layers: layers
                .into_iter()
                .map(|(name, spec)| Layer::new(name, spec, rng))
                .collect(),
            forward_done: false,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    /// Names of layers that carry a weight tensor.
    pub fn weight_layers(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| l.spec.has_params())
            .map(|l| l.name.clone())
            .collect()
    }

    /// `(qualified name, tensor)` for every parameter, e.g. `fc1.weight`.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for l in &self.layers {
            for (i, p) in l.params.iter().enumerate() {
                out.push((
                    format!("{}.{}", l.name, if i == 0 { "weight" } else { "bias" }),
                    p,
                ));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.params)
            .map(Tensor::len)
            .sum()
    }

    /// Replaces a parameter by qualified name; shape must match.
    pub fn set_param(&mut self, qualified: &str, value: Tensor) -> Result<()> {
        let (layer, which) = qualified
            .rsplit_once('.')
            .ok_or_else(|| Error::param(format!("bad parameter name `{qualified}`")))?;
        let idx = match which {
            "weight" => 0,
            "bias" => 1,
            _ => return Err(Error::param(format!("bad parameter name `{qualified}`"))),
        };
        let l = self
            .layer_mut(layer)
            .ok_or_else(|| Error::param(format!("no layer `{layer}`")))?;
        let slot = l
            .params
            .get_mut(idx)
            .ok_or_else(|| Error::param(format!("layer `{layer}` has no {which}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::dim(format!(
                "{qualified}: expected shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.rank() < 2 || batch.shape()[1..] != self.input_shape[..] {
            return Err(Error::dim(format!(
                "batch shape {:?} does not match model input N×{:?}",
                batch.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    fn logits_inner(&mut self, batch: &Tensor, keep: bool) -> Result<Tensor> {
        self.check_batch(batch)?;
        let last = self.layers.len() - 1;
        let mut x = batch.clone();
        for layer in &mut self.layers[..last] {
            x = layer.forward(&x, keep)?;
        }
        let n = x.shape()[0];
        let per = x.len() / n;
        x.reshape(&[n, per])
    }

    /// Mean softmax cross-entropy and logits; caches activations for `backward`.
    pub fn forward(&mut self, batch: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let logits = self.logits_inner(batch, true)?;
        let (loss, dlogits) = softmax_ce(&logits, labels)?;
        self.layers.last_mut().expect("loss layer").cache = Cache::Loss { dlogits };
        self.forward_done = true;
        Ok((loss, logits))
    }

    /// Loss only; leaves any cached activations untouched.
    pub fn loss(&mut self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        let logits = self.logits_inner(batch, false)?;
        Ok(softmax_ce(&logits, labels)?.0)
    }

    pub fn logits(&mut self, batch: &Tensor) -> Result<Tensor> {
        self.logits_inner(batch, false)
    }

    /// Fills `grads` with ∂loss/∂params for the batch of the last `forward`.
    pub fn backward(&mut self) -> Result<()> {
        if !self.forward_done {
            return Err(Error::State("backward called before forward".into()));
        }
        let last = self.layers.len() - 1;
        let Cache::Loss { dlogits } = std::mem::take(&mut self.layers[last].cache) else {
            return Err(Error::State("loss cache missing".into()));
        };
        let first_param = self
            .layers
            .iter()
            .position(|l| l.spec.has_params())
            .unwrap_or(0);
        let mut g = dlogits;
        for idx in (0..last).rev() {
            let need = idx > first_param;
            let layer = &mut self.layers[idx];
            if let LayerSpec::Dense { .. } = layer.spec {
                // Dense flattens its input; give it a matching 2-D gradient.
                let n = g.shape()[0];
                let per = g.len() / n;
                g = g.reshape(&[n, per])?;
            }
            match layer.backward(&g, need)? {
                Some(dx) => g = dx,
                None => break,
            }
        }
        self.forward_done = false;
        Ok(())
    }

    /// Fraction of correctly classified samples, evaluated in chunks.
    pub fn accuracy(&mut self, images: &Tensor, labels: &[usize], chunk: usize) -> Result<f64> {
        let n = images.shape()[0];
        if n != labels.len() {
            return Err(Error::dim("image and label counts differ"));
        }
        let per: usize = images.shape()[1..].iter().product();
        let mut correct = 0usize;
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let part = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
            let logits = self.logits(&part)?;
            let c = logits.shape()[1];
            for (i, row) in logits.data().chunks_exact(c).enumerate() {
                let pred = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                        if v > best.1 {
                            (j, v)
                        } else {
                            best
                        }
                    })
                    .0;
                if pred == labels[start + i] {
                    correct += 1;
                }
            }
            start = end;
        }
        Ok(correct as f64 / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::random_normal;

    fn tiny_dense(rng: &mut RngStream) -> ModelGraph {
        ModelGraph::new(
            &[3],
            vec![
                (
                    "fc1".into(),
                    LayerSpec::Dense {
                        inputs: 3,
                        outputs: 4,
                    },
                ),
                ("relu".into(), LayerSpec::Relu),
                (
                    "fc2".into(),
                    LayerSpec::Dense {
                        inputs: 4,
                        outputs: 3,
                    },
                ),
                ("loss".into(), LayerSpec::SoftmaxCe),
            ],
            rng,
        )
        .unwrap()
    }

    fn tiny_conv(rng: &mut RngStream) -> ModelGraph {
        ModelGraph::new(
            &[2, 6, 6],
            vec![
                (
                    "conv1".into(),
                    LayerSpec::Conv2d {
                        in_maps: 2,
                        out_maps: 3,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                    },
                ),
                ("relu1".into(), LayerSpec::Relu),
                (
                    "pool1".into(),
                    LayerSpec::MaxPool {
                        window: 2,
                        stride: 2,
                    },
                ),
                (
                    "conv2".into(),
                    LayerSpec::Conv2d {
                        in_maps: 3,
                        out_maps: 2,
                        kernel: 2,
                        stride: 2,
                        padding: 1,
                    },
                ),
                (
                    "fc".into(),
                    LayerSpec::Dense {
                        inputs: 8,
                        outputs: 3,
                    },
                ),
                ("loss".into(), LayerSpec::SoftmaxCe),
            ],
            rng,
        )
        .unwrap()
    }

    fn randomize(model: &mut ModelGraph, rng: &mut RngStream) {
        for l in &mut model.layers {
            for p in &mut l.params {
                *p = random_normal(rng, p.shape(), 0.0, 0.5).unwrap();
            }
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Central differences over every parameter of `model`.
    fn check_grads(model: &mut ModelGraph, x: &Tensor, y: &[usize]) {
        model.forward(x, y).unwrap();
        model.backward().unwrap();
        let analytic: Vec<Vec<f64>> = model
            .layers
            .iter()
            .flat_map(|l| l.grads.iter().map(|g| g.data().to_vec()))
            .collect();
        let h = 1e-5;
        let mut k = 0;
        for li in 0..model.layers.len() {
            for pi in 0..model.layers[li].params.len() {
                for e in 0..model.layers[li].params[pi].len() {
                    let orig = model.layers[li].params[pi].data()[e];
                    model.layers[li].params[pi].data_mut()[e] = orig + h;
                    let up = model.loss(x, y).unwrap();
                    model.layers[li].params[pi].data_mut()[e] = orig - h;
                    let down = model.loss(x, y).unwrap();
                    model.layers[li].params[pi].data_mut()[e] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = analytic[k][e];
                    assert!(
                        rel_err(an, fd) < 1e-4 || (an - fd).abs() < 1e-9,
                        "{}[{pi}][{e}]: analytic {an} vs fd {fd}",
                        model.layers[li].name
                    );
                }
                k += 1;
            }
        }
    }

    #[test]
    fn gradient_check_dense_relu() {
        let mut rng = RngStream::new(1);
        let mut m = tiny_dense(&mut rng);
        randomize(&mut m, &mut rng);
        let x = random_normal(&mut rng, &[5, 3], 0.0, 1.0).unwrap();
        check_grads(&mut m, &x, &[0, 1, 2, 1, 0]);
    }

    #[test]
    fn gradient_check_conv_pool() {
        let mut rng = RngStream::new(2);
        let mut m = tiny_conv(&mut rng);
        randomize(&mut m, &mut rng);
        let x = random_normal(&mut rng, &[3, 2, 6, 6], 0.0, 1.0).unwrap();
        check_grads(&mut m, &x, &[2, 0, 1]);
    }

    #[test]
    fn six_parameter_net() {
        // Dense 1→2 and 2→... keep six parameters in total: 2x2 weight + 2 bias.
        let mut rng = RngStream::new(3);
        let mut m = ModelGraph::new(
            &[2],
            vec![
                (
                    "fc".into(),
                    LayerSpec::Dense {
                        inputs: 2,
                        outputs: 2,
                    },
                ),
                ("loss".into(), LayerSpec::SoftmaxCe),
            ],
            &mut rng,
        )
        .unwrap();
        assert_eq!(m.param_count(), 6);
        randomize(&mut m, &mut rng);
        let x = random_normal(&mut rng, &[4, 2], 0.0, 1.0).unwrap();
        check_grads(&mut m, &x, &[0, 1, 1, 0]);
    }

    #[test]
    fn zero_weights_two_classes_loss_ln2() {
        let mut rng = RngStream::new(4);
        let mut m = ModelGraph::new(
            &[3],
            vec![
                (
                    "fc".into(),
                    LayerSpec::Dense {
                        inputs: 3,
                        outputs: 2,
                    },
                ),
                ("loss".into(), LayerSpec::SoftmaxCe),
            ],
            &mut rng,
        )
        .unwrap();
        m.set_param("fc.weight", Tensor::zeros(&[3, 2])).unwrap();
        let x = random_normal(&mut rng, &[4, 3], 0.0, 1.0).unwrap();
        let (loss, _) = m.forward(&x, &[0, 1, 1, 0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_matches_scalar_reimplementation() {
        let mut rng = RngStream::new(5);
        let mut m = tiny_dense(&mut rng);
        randomize(&mut m, &mut rng);
        let x = random_normal(&mut rng, &[4, 3], 0.0, 1.0).unwrap();
        let labels = [2, 0, 1, 1];
        let (loss, _) = m.forward(&x, &labels).unwrap();

        let w1 = m.layers[0].params[0].clone();
        let b1 = m.layers[0].params[1].clone();
        let w2 = m.layers[2].params[0].clone();
        let b2 = m.layers[2].params[1].clone();
        let mut total = 0.0;
        for i in 0..4 {
            let mut h = [0.0; 4];
            for j in 0..4 {
                let mut s = b1.data()[j];
                for k in 0..3 {
                    s += x.get2(i, k) * w1.get2(k, j);
                }
                h[j] = if s > 0.0 { s } else { 0.0 };
            }
            let mut z = [0.0; 3];
            for c in 0..3 {
                let mut s = b2.data()[c];
                for j in 0..4 {
                    s += h[j] * w2.get2(j, c);
                }
                z[c] = s;
            }
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            total += -(z[labels[i]].exp() / denom).ln();
        }
        assert!((loss - total / 4.0).abs() < 1e-10);
    }

    #[test]
    fn zero_input_bias_free_weight_grad_is_zero() {
        let mut rng = RngStream::new(6);
        let mut m = tiny_dense(&mut rng);
        let x = Tensor::zeros(&[3, 3]);
        m.forward(&x, &[0, 1, 2]).unwrap();
        m.backward().unwrap();
        assert!(m.layers[0].grads[0].data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn duplicated_batch_leaves_mean_grads_unchanged() {
        let mut rng = RngStream::new(7);
        let mut m = tiny_dense(&mut rng);
        randomize(&mut m, &mut rng);
        let x = random_normal(&mut rng, &[3, 3], 0.0, 1.0).unwrap();
        let y = [0, 2, 1];
        m.forward(&x, &y).unwrap();
        m.backward().unwrap();
        let g1: Vec<Tensor> = m.layers.iter().flat_map(|l| l.grads.clone()).collect();
        let mut doubled = x.data().to_vec();
        doubled.extend_from_slice(x.data());
        let x2 = Tensor::new(vec![6, 3], doubled).unwrap();
        m.forward(&x2, &[0, 2, 1, 0, 2, 1]).unwrap();
        m.backward().unwrap();
        let g2: Vec<Tensor> = m.layers.iter().flat_map(|l| l.grads.clone()).collect();
        for (a, b) in g1.iter().zip(&g2) {
            assert!(a.sub(b).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut rng = RngStream::new(8);
        let mut m = tiny_dense(&mut rng);
        assert!(matches!(m.backward(), Err(Error::State(_))));
    }

    #[test]
    fn batch_shape_mismatch() {
        let mut rng = RngStream::new(9);
        let mut m = tiny_dense(&mut rng);
        assert!(matches!(
            m.forward(&Tensor::zeros(&[2, 4]), &[0, 1]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zoo_parameter_counts() {
        let mut rng = RngStream::new(10);
        let a = lenet_300_100(&mut rng).unwrap();
        let w: usize = a
            .weight_layers()
            .iter()
            .map(|n| a.layer(n).unwrap().params[0].len())
            .sum();
        assert_eq!(w, 784 * 300 + 300 * 100 + 100 * 10);
        let b = lenet5(&mut rng).unwrap();
        let sizes: Vec<usize> = b
            .weight_layers()
            .iter()
            .map(|n| b.layer(n).unwrap().params[0].len())
            .collect();
        assert_eq!(sizes, vec![500, 25_000, 400_000, 5_000]);
        assert_eq!(b.layer("conv2").unwrap().params[0].shape(), &[5, 5, 20, 50]);
    }
}
