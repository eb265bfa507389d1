//! Differentiable building blocks.
//!
//! Each layer owns its parameter tensors. `bind` registers them as leaves of a
//! [`Graph`] and returns a handle whose `apply` wires the forward pass; the
//! plain `forward` methods evaluate the same graph code on constants.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diff::{Graph, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::geometry::{exp0, norm, PoincarePoint};

/// Geometry a parameter tensor lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Euclidean,
    /// Every row is a point of the Poincaré ball.
    Manifold,
}

/// Anything that owns named parameter tensors, visited in a fixed order.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Space, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Space, &mut Tensor));

    /// Binds every parameter in visit order as a graph leaf.
    fn bind_all(&self, g: &mut Graph) -> Vec<Var> {
        let mut vars = Vec::new();
        self.visit("", &mut |_, _, t| vars.push(g.param(t.clone())));
        vars
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized by construction")
}

fn as_row(x: &[f64]) -> Tensor {
    Tensor::matrix(1, x.len(), x.to_vec()).expect("single row")
}

/// Affine map `W x + b` with `W` of shape `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct EuclideanLinear {
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl LinearVars {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.linear(x, self.w, Some(self.b))
    }
}

impl EuclideanLinear {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.shape().len() != 2 || bias.len() != weights.rows() {
            return Err(invalid(format!(
                "linear layer: weights {:?} with bias of length {}",
                weights.shape(),
                bias.len()
            )));
        }
        if !weights.is_finite() || !bias.is_finite() {
            return Err(invalid("linear layer: non-finite parameters"));
        }
        Ok(Self { weights, bias })
    }

    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            weights: glorot(output, input, rng),
            bias: Tensor::vector(vec![0.0; output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn bind(&self, g: &mut Graph) -> LinearVars {
        LinearVars {
            w: g.param(self.weights.clone()),
            b: g.param(self.bias.clone()),
        }
    }

    pub(crate) fn bind_from(vars: &mut impl Iterator<Item = Var>) -> LinearVars {
        LinearVars {
            w: vars.next().expect("weights bound"),
            b: vars.next().expect("bias bound"),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let h = self.bind(&mut g);
        let x = g.constant(as_row(x));
        let y = h.apply(&mut g, x)?;
        Ok(g.value(y).data().to_vec())
    }
}

impl Parameterized for EuclideanLinear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Space, &Tensor)) {
        f(join(prefix, "weights"), Space::Euclidean, &self.weights);
        f(join(prefix, "bias"), Space::Euclidean, &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Space, &mut Tensor)) {
        f(join(prefix, "weights"), Space::Euclidean, &mut self.weights);
        f(join(prefix, "bias"), Space::Euclidean, &mut self.bias);
    }
}

/// Gated recurrent cell with update and reset gates:
///
/// ```text
/// r  = σ(W_r z + U_r h + b_r)
/// u  = σ(W_u z + U_u h + b_u)
/// h̃  = tanh(W z + U (r ⊙ h) + b)
/// h' = (1 − u) ⊙ h + u ⊙ h̃
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentCell {
    /// Input projections `W_r`, `W_u`, `W` with their biases.
    pub input_reset: EuclideanLinear,
    pub input_update: EuclideanLinear,
    pub input_candidate: EuclideanLinear,
    /// Hidden projections `U_r`, `U_u`, `U` (`h × h`).
    pub hidden_reset: Tensor,
    pub hidden_update: Tensor,
    pub hidden_candidate: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct RecurrentVars {
    ir: LinearVars,
    iu: LinearVars,
    ic: LinearVars,
    hr: Var,
    hu: Var,
    hc: Var,
}

impl RecurrentVars {
    /// One step from state `h` (`m × hidden`) on input `z` (`m × input`).
    pub fn step(&self, g: &mut Graph, h: Var, z: Var) -> Result<Var> {
        let a = self.ir.apply(g, z)?;
        let b = g.linear(h, self.hr, None)?;
        let pre_r = g.add(a, b)?;
        let r = g.sigmoid(pre_r);

        let a = self.iu.apply(g, z)?;
        let b = g.linear(h, self.hu, None)?;
        let pre_u = g.add(a, b)?;
        let u = g.sigmoid(pre_u);

        let rh = g.mul(r, h)?;
        let a = self.ic.apply(g, z)?;
        let b = g.linear(rh, self.hc, None)?;
        let pre_c = g.add(a, b)?;
        let cand = g.tanh(pre_c);

        // h' = h + u ⊙ (h̃ − h)
        let diff = g.sub(cand, h)?;
        let gated = g.mul(u, diff)?;
        g.add(h, gated)
    }
}

impl RecurrentCell {
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            input_reset: EuclideanLinear::init(input, hidden, rng),
            input_update: EuclideanLinear::init(input, hidden, rng),
            input_candidate: EuclideanLinear::init(input, hidden, rng),
            hidden_reset: glorot(hidden, hidden, rng),
            hidden_update: glorot(hidden, hidden, rng),
            hidden_candidate: glorot(hidden, hidden, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_reset.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_reset.rows()
    }

    pub fn bind(&self, g: &mut Graph) -> RecurrentVars {
        let vars = self.bind_all(g);
        Self::bind_from(&mut vars.into_iter())
    }

    pub(crate) fn bind_from(vars: &mut impl Iterator<Item = Var>) -> RecurrentVars {
        let ir = EuclideanLinear::bind_from(vars);
        let iu = EuclideanLinear::bind_from(vars);
        let ic = EuclideanLinear::bind_from(vars);
        let mut next = || vars.next().expect("hidden weights bound");
        RecurrentVars {
            ir,
            iu,
            ic,
            hr: next(),
            hu: next(),
            hc: next(),
        }
    }

    pub fn step(&self, c_prev: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        if c_prev.len() != self.hidden_dim() || z.len() != self.input_dim() {
            return Err(invalid(format!(
                "recurrent step: state {} / input {} for a {}→{} cell",
                c_prev.len(),
                z.len(),
                self.input_dim(),
                self.hidden_dim()
            )));
        }
        let mut g = Graph::new();
        let cell = self.bind(&mut g);
        let h = g.constant(as_row(c_prev));
        let z = g.constant(as_row(z));
        let out = cell.step(&mut g, h, z)?;
        Ok(g.value(out).data().to_vec())
    }
}

impl Parameterized for RecurrentCell {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Space, &Tensor)) {
        self.input_reset.visit(&join(prefix, "input_reset"), f);
        self.input_update.visit(&join(prefix, "input_update"), f);
        self.input_candidate
            .visit(&join(prefix, "input_candidate"), f);
        f(
            join(prefix, "hidden_reset"),
            Space::Euclidean,
            &self.hidden_reset,
        );
        f(
            join(prefix, "hidden_update"),
            Space::Euclidean,
            &self.hidden_update,
        );
        f(
            join(prefix, "hidden_candidate"),
            Space::Euclidean,
            &self.hidden_candidate,
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Space, &mut Tensor)) {
        self.input_reset.visit_mut(&join(prefix, "input_reset"), f);
        self.input_update
            .visit_mut(&join(prefix, "input_update"), f);
        self.input_candidate
            .visit_mut(&join(prefix, "input_candidate"), f);
        f(
            join(prefix, "hidden_reset"),
            Space::Euclidean,
            &mut self.hidden_reset,
        );
        f(
            join(prefix, "hidden_update"),
            Space::Euclidean,
            &mut self.hidden_update,
        );
        f(
            join(prefix, "hidden_candidate"),
            Space::Euclidean,
            &mut self.hidden_candidate,
        );
    }
}

/// Möbius feed-forward layer `exp0(W log0(x)) ⊕ b`.
///
/// `W` is an ordinary Euclidean parameter; only the bias lives on the ball.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperbolicLinear {
    pub weights: Tensor,
    /// A `1 × out` ball point.
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct HyperbolicLinearVars {
    pub w: Var,
    pub b: Var,
}

impl HyperbolicLinearVars {
    /// Maps ball points (`m × in`) to ball points (`m × out`).
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let v = g.log0(x);
        let wv = g.linear(v, self.w, None)?;
        let p = g.exp0(wv);
        g.mobius_add(p, self.b)
    }
}

impl HyperbolicLinear {
    pub fn new(weights: Tensor, bias: &PoincarePoint) -> Result<Self> {
        if weights.shape().len() != 2 || weights.rows() != bias.dim() {
            return Err(invalid(format!(
                "hyperbolic layer: weights {:?} with bias of dimension {}",
                weights.shape(),
                bias.dim()
            )));
        }
        Ok(Self {
            weights,
            bias: as_row(bias.coords()),
        })
    }

    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            weights: glorot(output, input, rng),
            bias: Tensor::matrix(1, output, vec![0.0; output]).expect("single row"),
        }
    }

    pub fn bias_point(&self) -> PoincarePoint {
        PoincarePoint::try_from(self.bias.data().to_vec()).expect("bias kept on the ball")
    }

    pub fn bind(&self, g: &mut Graph) -> HyperbolicLinearVars {
        HyperbolicLinearVars {
            w: g.param(self.weights.clone()),
            b: g.param(self.bias.clone()),
        }
    }

    pub(crate) fn bind_from(vars: &mut impl Iterator<Item = Var>) -> HyperbolicLinearVars {
        HyperbolicLinearVars {
            w: vars.next().expect("weights bound"),
            b: vars.next().expect("bias bound"),
        }
    }

    pub fn forward(&self, x: &PoincarePoint) -> Result<PoincarePoint> {
        if x.dim() != self.weights.cols() {
            return Err(invalid(format!(
                "hyperbolic layer expects dimension {}, got {}",
                self.weights.cols(),
                x.dim()
            )));
        }
        let mut g = Graph::new();
        let h = self.bind(&mut g);
        let x = g.constant(as_row(x.coords()));
        let y = h.apply(&mut g, x)?;
        PoincarePoint::try_from(g.value(y).data().to_vec())
    }
}

impl Parameterized for HyperbolicLinear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Space, &Tensor)) {
        f(join(prefix, "weights"), Space::Euclidean, &self.weights);
        f(join(prefix, "bias"), Space::Manifold, &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Space, &mut Tensor)) {
        f(join(prefix, "weights"), Space::Euclidean, &mut self.weights);
        f(join(prefix, "bias"), Space::Manifold, &mut self.bias);
    }
}

/// Multiclass logistic regression on the ball: one prototype and normal per class.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperbolicMLR {
    /// `classes × dim`, each row on the ball.
    pub prototypes: Tensor,
    /// `classes × dim`, each row nonzero.
    pub normals: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct MlrVars {
    pub p: Var,
    pub a: Var,
}

impl MlrVars {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.mlr_logits(x, self.p, self.a)
    }
}

impl HyperbolicMLR {
    pub fn new(prototypes: &[PoincarePoint], normals: Vec<Vec<f64>>) -> Result<Self> {
        if prototypes.is_empty() || prototypes.len() != normals.len() {
            return Err(invalid("MLR head needs one normal per prototype"));
        }
        if let Some(k) = normals.iter().position(|a| norm(a) == 0.0) {
            return Err(Error::DegenerateClass(k));
        }
        let rows: Vec<Vec<f64>> = prototypes.iter().map(|p| p.coords().to_vec()).collect();
        let prototypes = Tensor::from_rows(&rows)?;
        let normals = Tensor::from_rows(&normals)?;
        if prototypes.shape() != normals.shape() {
            return Err(invalid("MLR head: prototype and normal dimensions differ"));
        }
        Ok(Self {
            prototypes,
            normals,
        })
    }

    pub fn init(dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let small = Normal::new(0.0, 0.01).expect("valid std");
        let unit = Normal::new(0.0, 1.0).expect("valid std");
        let mut protos = Vec::with_capacity(classes * dim);
        let mut normals = Vec::with_capacity(classes * dim);
        for _ in 0..classes {
            let v: Vec<f64> = (0..dim).map(|_| small.sample(rng)).collect();
            protos.extend(exp0(&v).expect("finite sample").into_coords());
            let mut a: Vec<f64> = (0..dim).map(|_| unit.sample(rng)).collect();
            let n = norm(&a);
            if n == 0.0 {
                a[0] = 1.0;
            } else {
                a.iter_mut().for_each(|c| *c /= n);
            }
            normals.extend(a);
        }
        Self {
            prototypes: Tensor::matrix(classes, dim, protos).expect("sized"),
            normals: Tensor::matrix(classes, dim, normals).expect("sized"),
        }
    }

    pub fn classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn bind(&self, g: &mut Graph) -> MlrVars {
        MlrVars {
            p: g.param(self.prototypes.clone()),
            a: g.param(self.normals.clone()),
        }
    }

    pub fn logits(&self, x: &PoincarePoint) -> Result<Vec<f64>> {
        if x.dim() != self.prototypes.cols() {
            return Err(invalid("MLR head: input dimension mismatch"));
        }
        let mut g = Graph::new();
        let h = self.bind(&mut g);
        let x = g.constant(as_row(x.coords()));
        let y = h.apply(&mut g, x)?;
        Ok(g.value(y).data().to_vec())
    }
}

impl Parameterized for HyperbolicMLR {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Space, &Tensor)) {
        f(
            join(prefix, "prototypes"),
            Space::Manifold,
            &self.prototypes,
        );
        f(join(prefix, "normals"), Space::Euclidean, &self.normals);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Space, &mut Tensor)) {
        f(
            join(prefix, "prototypes"),
            Space::Manifold,
            &mut self.prototypes,
        );
        f(join(prefix, "normals"), Space::Euclidean, &mut self.normals);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{distance, log0};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
        (0..w.rows())
            .map(|i| w.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    #[test]
    fn linear_identity_and_constant() {
        let id = EuclideanLinear::new(eye(3), Tensor::vector(vec![0.0; 3])).unwrap();
        assert_eq!(id.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![1.0, -2.0, 3.0]);
        let c =
            EuclideanLinear::new(Tensor::zeros(&[2, 3]), Tensor::vector(vec![4.0, 5.0])).unwrap();
        assert_eq!(c.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![4.0, 5.0]);
        assert!(c.forward(&[1.0]).is_err());
    }

    #[test]
    fn linear_matches_direct_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = EuclideanLinear::init(4, 3, &mut rng);
        layer.bias = Tensor::vector(vec![0.1, -0.2, 0.3]);
        let x = [0.5, -1.0, 2.0, 0.25];
        let want: Vec<f64> = matvec(&layer.weights, &x)
            .iter()
            .zip(layer.bias.data())
            .map(|(a, b)| a + b)
            .collect();
        let got = layer.forward(&x).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-14);
        }
    }

    fn saturated_cell(update_bias: f64) -> RecurrentCell {
        let zero_lin = |b: f64| {
            EuclideanLinear::new(Tensor::zeros(&[2, 2]), Tensor::vector(vec![b; 2])).unwrap()
        };
        RecurrentCell {
            input_reset: zero_lin(0.0),
            input_update: zero_lin(update_bias),
            input_candidate: zero_lin(0.3),
            hidden_reset: Tensor::zeros(&[2, 2]),
            hidden_update: Tensor::zeros(&[2, 2]),
            hidden_candidate: Tensor::zeros(&[2, 2]),
        }
    }

    #[test]
    fn recurrent_gate_saturation() {
        let carry = saturated_cell(-1e3);
        assert_eq!(
            carry.step(&[0.4, -0.7], &[1.0, 2.0]).unwrap(),
            vec![0.4, -0.7]
        );
        let replace = saturated_cell(1e3);
        let c = replace.step(&[0.4, -0.7], &[1.0, 2.0]).unwrap();
        for v in c {
            assert!((v - 0.3f64.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn recurrent_matches_hand_rolled_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cell = RecurrentCell::init(3, 2, &mut rng);
        let zs = [[0.1, 0.2, -0.3], [1.0, -0.5, 0.0], [-0.2, 0.4, 0.9]];
        let mut h = vec![0.0; 2];
        let mut reference = vec![0.0; 2];
        for z in &zs {
            h = cell.step(&h, z).unwrap();
            let add =
                |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| x + y).collect::<Vec<_>>();
            let r: Vec<f64> = add(
                cell.input_reset.forward(z).unwrap(),
                matvec(&cell.hidden_reset, &reference),
            )
            .into_iter()
            .map(sigmoid)
            .collect();
            let u: Vec<f64> = add(
                cell.input_update.forward(z).unwrap(),
                matvec(&cell.hidden_update, &reference),
            )
            .into_iter()
            .map(sigmoid)
            .collect();
            let rh: Vec<f64> = r.iter().zip(&reference).map(|(a, b)| a * b).collect();
            let cand: Vec<f64> = add(
                cell.input_candidate.forward(z).unwrap(),
                matvec(&cell.hidden_candidate, &rh),
            )
            .into_iter()
            .map(f64::tanh)
            .collect();
            reference = (0..2)
                .map(|i| (1.0 - u[i]) * reference[i] + u[i] * cand[i])
                .collect();
        }
        for (a, b) in h.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn hyperbolic_layer_cases() {
        let x = PoincarePoint::try_from(vec![0.3, -0.6]).unwrap();
        let id = HyperbolicLinear::new(eye(2), &PoincarePoint::origin(2)).unwrap();
        let y = id.forward(&x).unwrap();
        assert!(distance(&x, &y) < 1e-9);

        let b = PoincarePoint::try_from(vec![0.2, 0.1]).unwrap();
        let shift = HyperbolicLinear::new(eye(2), &b).unwrap();
        let y = shift.forward(&PoincarePoint::origin(2)).unwrap();
        assert_eq!(y.coords(), b.coords());

        let double = HyperbolicLinear::new(
            Tensor::matrix(1, 1, vec![2.0]).unwrap(),
            &PoincarePoint::origin(1),
        )
        .unwrap();
        let y = double
            .forward(&PoincarePoint::try_from(vec![0.5]).unwrap())
            .unwrap();
        assert!((y.coords()[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn hyperbolic_layer_stays_in_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = HyperbolicLinear::init(3, 3, &mut rng);
        layer.weights.data_mut().iter_mut().for_each(|w| *w *= 50.0);
        let x = PoincarePoint::try_from(vec![0.9, 0.1, -0.3]).unwrap();
        let y = layer.forward(&x).unwrap();
        assert!(y.norm() <= crate::geometry::MAX_NORM);
        assert!(log0(&y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mlr_cases() {
        let p = PoincarePoint::try_from(vec![0.2, -0.1]).unwrap();
        let head = HyperbolicMLR::new(std::slice::from_ref(&p), vec![vec![1.0, 2.0]]).unwrap();
        assert!(head.logits(&p).unwrap()[0].abs() < 1e-12);

        let o = PoincarePoint::origin(2);
        let anti =
            HyperbolicMLR::new(&[o.clone(), o], vec![vec![0.3, -0.4], vec![-0.3, 0.4]]).unwrap();
        let l = anti
            .logits(&PoincarePoint::try_from(vec![0.5, 0.2]).unwrap())
            .unwrap();
        assert!((l[0] + l[1]).abs() < 1e-12);

        assert!(matches!(
            HyperbolicMLR::new(&[PoincarePoint::origin(2)], vec![vec![0.0, 0.0]]),
            Err(Error::DegenerateClass(0))
        ));
    }

    #[test]
    fn mlr_separates_two_clusters() {
        let protos = [
            PoincarePoint::try_from(vec![0.25, 0.0]).unwrap(),
            PoincarePoint::try_from(vec![-0.25, 0.0]).unwrap(),
        ];
        let head = HyperbolicMLR::new(&protos, vec![vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let jitter: f64 = rng.gen_range(-0.05..0.05);
            let right = PoincarePoint::try_from(vec![0.5 + jitter, jitter]).unwrap();
            let left = PoincarePoint::try_from(vec![-0.5 + jitter, jitter]).unwrap();
            let lr = head.logits(&right).unwrap();
            let ll = head.logits(&left).unwrap();
            assert!(lr[0] > lr[1]);
            assert!(ll[1] > ll[0]);
        }
    }

    #[test]
    fn init_is_deterministic_and_follows_rules() {
        let a = HyperbolicLinear::init(4, 3, &mut ChaCha8Rng::seed_from_u64(9));
        let b = HyperbolicLinear::init(4, 3, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.bias.data().iter().all(|&v| v == 0.0));
        let bound = (6.0f64 / 7.0).sqrt();
        assert!(a.weights.data().iter().all(|w| w.abs() <= bound));

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let head = HyperbolicMLR::init(16, 27, &mut rng);
        for k in 0..head.classes() {
            assert!(norm(head.prototypes.row(k)) < 0.2);
            assert!((norm(head.normals.row(k)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn visit_names_are_stable() {
        let cell = RecurrentCell::init(2, 3, &mut ChaCha8Rng::seed_from_u64(0));
        let mut names = Vec::new();
        cell.visit("g", &mut |n, _, _| names.push(n));
        assert_eq!(names[0], "g.input_reset.weights");
        assert_eq!(names.last().unwrap(), "g.hidden_candidate");
        assert_eq!(names.len(), 9);
    }
}
