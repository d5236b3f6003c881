use rand::Rng;

use super::{ArchSpec, LayerSpec};
use crate::error::{Error, Result};
use crate::mask::{MaskLayout, PruneMask};
use crate::scalar::Scalar;

/// Row-major `(out_dim, in_dim)` weights plus a bias per output neuron.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseLayer {
            in_dim,
            out_dim,
            weights: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn row(&self, l: usize) -> &[T] {
        &self.weights[l * self.in_dim..(l + 1) * self.in_dim]
    }

    /// Iterates the scalars of group `l`: its incoming weights then its bias.
    pub fn group(&self, l: usize) -> impl Iterator<Item = T> + '_ {
        self.row(l).iter().copied().chain(std::iter::once(self.bias[l]))
    }

    fn zero_group(&mut self, l: usize) {
        let in_dim = self.in_dim;
        self.weights[l * in_dim..(l + 1) * in_dim].fill(T::zero());
        self.bias[l] = T::zero();
    }

    fn same_shape(&self, other: &DenseLayer<T>) -> bool {
        self.in_dim == other.in_dim
            && self.out_dim == other.out_dim
            && self.weights.len() == other.weights.len()
            && self.bias.len() == other.bias.len()
    }
}

/// Scalar parameters of a network, one entry per dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    arch: ArchSpec,
    layers: Vec<DenseLayer<T>>,
}

/// Gradient of the loss, shape-identical to the model it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<DenseLayer<T>>,
}

/// Inputs `(batch_size × in_dim)` in row-major order plus class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    inputs: Vec<T>,
    labels: Vec<usize>,
    dim: usize,
}

impl<T: Scalar> Batch<T> {
    pub fn new(inputs: Vec<T>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::shape("batch must contain at least one sample"));
        }
        if dim == 0 || inputs.len() != dim * labels.len() {
            return Err(Error::shape(format!(
                "batch has {} inputs for {} samples of dim {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Batch { inputs, labels, dim })
    }

    pub fn from_f64(inputs: &[f64], dim: usize, labels: &[usize]) -> Result<Self> {
        Batch::new(
            inputs.iter().map(|&v| T::from_f64_lossy(v)).collect(),
            dim,
            labels.to_vec(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[T] {
        &self.inputs
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Gathers the given sample indices into a new batch.
    pub fn select(&self, indices: &[usize]) -> Batch<T> {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch {
            inputs,
            labels,
            dim: self.dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    /// Row-major `(batch_size × num_classes)`.
    pub logits: Vec<T>,
    /// Mean softmax cross-entropy.
    pub loss: T,
}

impl<T: Scalar> Model<T> {
    pub fn zeros(arch: &ArchSpec) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .dense_layers()
            .map(|l| DenseLayer::zeros(l.in_dim(), l.out_dim()))
            .collect();
        Ok(Model {
            arch: arch.clone(),
            layers,
        })
    }

    /// Uniform(−a, a) weights with `a = sqrt(6 / (in + out))`, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: &ArchSpec, rng: &mut R) -> Result<Self> {
        let mut model = Model::zeros(arch)?;
        for layer in &mut model.layers {
            let a = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            for w in &mut layer.weights {
                *w = T::from_f64_lossy(rng.random_range(-a..a));
            }
        }
        Ok(model)
    }

    pub fn from_layers(arch: &ArchSpec, layers: Vec<DenseLayer<T>>) -> Result<Self> {
        let template = Model::<T>::zeros(arch)?;
        if layers.len() != template.layers.len() || !layers.iter().zip(&template.layers).all(|(a, b)| a.same_shape(b)) {
            return Err(Error::shape("layers do not match the architecture"));
        }
        Ok(Model {
            arch: arch.clone(),
            layers,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer<T>] {
        &mut self.layers
    }

    pub fn mask_layout(&self) -> MaskLayout {
        MaskLayout::from_arch(&self.arch)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All scalars in layer order, weights before biases.
    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::shape(format!(
                "expected {} scalars, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let n = l.weights.len();
            l.weights.copy_from_slice(&values[offset..offset + n]);
            offset += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &Model<T>) -> bool {
        self.arch == other.arch
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
    }

    /// Converts every scalar to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    in_dim: l.in_dim,
                    out_dim: l.out_dim,
                    weights: l
                        .weights
                        .iter()
                        .map(|v| U::from_f64_lossy(v.to_f64_lossless()))
                        .collect(),
                    bias: l.bias.iter().map(|v| U::from_f64_lossy(v.to_f64_lossless())).collect(),
                })
                .collect(),
        }
    }

    /// Zeroes every pruned group in place.
    pub fn mask_in_place(&mut self, mask: &PruneMask) -> Result<()> {
        mask.check_layout(&self.mask_layout())?;
        for (m, bits) in mask.layers().iter().enumerate() {
            for (l, &keep) in bits.iter().enumerate() {
                if !keep {
                    self.layers[m].zero_group(l);
                }
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch<T>) -> Result<()> {
        if batch.dim() != self.arch.input_dim() {
            return Err(Error::shape(format!(
                "batch dim {} does not match model input dim {}",
                batch.dim(),
                self.arch.input_dim()
            )));
        }
        let classes = self.arch.num_classes();
        if let Some(&bad) = batch.labels().iter().find(|&&y| y >= classes) {
            return Err(Error::shape(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(())
    }

    /// Runs the network and keeps every intermediate activation.
    /// `acts[0]` is the input, `acts[i + 1]` the output of arch layer `i`.
    fn forward_cached(&self, batch: &Batch<T>) -> Vec<Vec<T>> {
        let n = batch.len();
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(self.arch.layers.len() + 1);
        acts.push(batch.inputs().to_vec());
        let mut dense_idx = 0;
        for spec in &self.arch.layers {
            let input = acts.last().expect("input activation");
            let out = match spec {
                LayerSpec::Dense { .. } => {
                    let layer = &self.layers[dense_idx];
                    dense_idx += 1;
                    let mut out = Vec::with_capacity(n * layer.out_dim);
                    for i in 0..n {
                        let x = &input[i * layer.in_dim..(i + 1) * layer.in_dim];
                        for o in 0..layer.out_dim {
                            let dot: T = layer.row(o).iter().zip(x).map(|(&w, &v)| w * v).sum();
                            out.push(dot + layer.bias[o]);
                        }
                    }
                    out
                }
                LayerSpec::Relu { .. } => input.iter().map(|&v| v.max(T::zero())).collect(),
            };
            acts.push(out);
        }
        acts
    }

    pub fn forward(&self, batch: &Batch<T>) -> Result<ForwardOutput<T>> {
        self.check_batch(batch)?;
        let mut acts = self.forward_cached(batch);
        let logits = acts.pop().expect("logits");
        let classes = self.arch.num_classes();
        let mut total = T::zero();
        for (i, &y) in batch.labels().iter().enumerate() {
            let row = &logits[i * classes..(i + 1) * classes];
            total += log_sum_exp(row) - row[y];
        }
        let loss = total / T::from_usize(batch.len()).expect("batch size");
        Ok(ForwardOutput { logits, loss })
    }

    /// Loss and its exact gradient with respect to every parameter.
    pub fn loss_and_gradients(&self, batch: &Batch<T>) -> Result<(T, Gradients<T>)> {
        self.check_batch(batch)?;
        let n = batch.len();
        let inv_n = T::one() / T::from_usize(n).expect("batch size");
        let acts = self.forward_cached(batch);
        let classes = self.arch.num_classes();
        let logits = &acts[acts.len() - 1];

        // dL/dlogits = (softmax - onehot) / n
        let mut loss = T::zero();
        let mut delta = Vec::with_capacity(n * classes);
        for (i, &y) in batch.labels().iter().enumerate() {
            let row = &logits[i * classes..(i + 1) * classes];
            let lse = log_sum_exp(row);
            loss += lse - row[y];
            for (c, &z) in row.iter().enumerate() {
                let p = (z - lse).exp();
                let target = if c == y { T::one() } else { T::zero() };
                delta.push((p - target) * inv_n);
            }
        }
        loss *= inv_n;

        let mut grads: Vec<DenseLayer<T>> = self
            .layers
            .iter()
            .map(|l| DenseLayer::zeros(l.in_dim, l.out_dim))
            .collect();
        let mut dense_idx = self.layers.len();
        for (i, spec) in self.arch.layers.iter().enumerate().rev() {
            let input = &acts[i];
            match spec {
                LayerSpec::Dense { in_dim, out_dim } => {
                    dense_idx -= 1;
                    let layer = &self.layers[dense_idx];
                    let g = &mut grads[dense_idx];
                    let mut delta_in = vec![T::zero(); n * in_dim];
                    for s in 0..n {
                        let x = &input[s * in_dim..(s + 1) * in_dim];
                        let d = &delta[s * out_dim..(s + 1) * out_dim];
                        let back = &mut delta_in[s * in_dim..(s + 1) * in_dim];
                        for (o, &dv) in d.iter().enumerate() {
                            g.bias[o] += dv;
                            let grow = &mut g.weights[o * in_dim..(o + 1) * in_dim];
                            for (gw, &xv) in grow.iter_mut().zip(x) {
                                *gw += dv * xv;
                            }
                            for (b, &w) in back.iter_mut().zip(layer.row(o)) {
                                *b += dv * w;
                            }
                        }
                    }
                    delta = delta_in;
                }
                LayerSpec::Relu { .. } => {
                    for (d, &x) in delta.iter_mut().zip(input) {
                        if x <= T::zero() {
                            *d = T::zero();
                        }
                    }
                }
            }
        }
        Ok((loss, Gradients { layers: grads }))
    }

    pub fn backward(&self, batch: &Batch<T>) -> Result<Gradients<T>> {
        self.loss_and_gradients(batch).map(|(_, g)| g)
    }

    /// Loss of the network with pruned groups zeroed.
    pub fn masked_loss(&self, mask: &PruneMask, batch: &Batch<T>) -> Result<T> {
        let mut masked = self.clone();
        masked.mask_in_place(mask)?;
        Ok(masked.forward(batch)?.loss)
    }

    /// `w' = (w − lr·g) ⊙ expand(c)`, applied in place.
    pub fn sgd_step_in_place(&mut self, grads: &Gradients<T>, lr: T, mask: &PruneMask) -> Result<()> {
        if grads.layers.len() != self.layers.len()
            || !grads.layers.iter().zip(&self.layers).all(|(g, l)| g.same_shape(l))
        {
            return Err(Error::shape("gradient shape does not match model"));
        }
        mask.check_layout(&self.mask_layout())?;
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, &gw) in layer.weights.iter_mut().zip(&g.weights) {
                *w -= lr * gw;
            }
            for (b, &gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
        self.mask_in_place(mask)
    }

    pub fn sgd_step(&self, grads: &Gradients<T>, lr: T, mask: &PruneMask) -> Result<Model<T>> {
        let mut next = self.clone();
        next.sgd_step_in_place(grads, lr, mask)?;
        Ok(next)
    }

    pub fn predict(&self, batch: &Batch<T>) -> Result<Vec<usize>> {
        let out = self.forward(batch)?;
        let classes = self.arch.num_classes();
        Ok(out
            .logits
            .chunks(classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0, T::neg_infinity()),
                        |best, (c, &v)| if v > best.1 { (c, v) } else { best },
                    )
                    .0
            })
            .collect())
    }

    /// Fraction of correctly classified samples.
    pub fn accuracy(&self, batch: &Batch<T>) -> Result<f64> {
        let predicted = self.predict(batch)?;
        let correct = predicted.iter().zip(batch.labels()).filter(|(p, y)| p == y).count();
        Ok(correct as f64 / batch.len() as f64)
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
    max + sum.ln()
}
