//! The predictive pipeline: encoder `f`, recurrent aggregator `g`, horizon
//! predictor `φ`, and the head that places embeddings in the loss space.
//!
//! In hyperbolic mode both predictions and targets go through `exp0` and the
//! shared Möbius layer; in Euclidean mode a plain linear head replaces both.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{DistanceKind, Graph, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::geometry::{norm, PoincarePoint};
use crate::layers::{
    EuclideanLinear, HyperbolicLinear, LinearVars, Parameterized, RecurrentCell, RecurrentVars,
    Space,
};
use crate::loss::contrastive_loss_var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSpace {
    Hyperbolic,
    Euclidean,
}

impl ModelSpace {
    pub fn name(self) -> &'static str {
        match self {
            ModelSpace::Hyperbolic => "hyperbolic",
            ModelSpace::Euclidean => "euclidean",
        }
    }

    pub fn distance_kind(self) -> DistanceKind {
        match self {
            ModelSpace::Hyperbolic => DistanceKind::Hyperbolic,
            ModelSpace::Euclidean => DistanceKind::Euclidean,
        }
    }
}

/// How the horizon `δ` is fed to the predictor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizonEncoding {
    /// A single input `δ / δ_max`.
    #[default]
    Scalar,
    /// `δ_max` indicator inputs.
    OneHot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub d_in: usize,
    pub d_z: usize,
    pub d_c: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_in: 32,
            d_z: 16,
            d_c: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Hyperbolic(HyperbolicLinear),
    Euclidean(EuclideanLinear),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveModel {
    pub space: ModelSpace,
    pub dims: ModelDims,
    pub delta_max: usize,
    pub horizon: HorizonEncoding,
    pub encoder: [EuclideanLinear; 2],
    pub aggregator: RecurrentCell,
    pub predictor: [EuclideanLinear; 2],
    pub head: Head,
}

#[derive(Clone, Copy, Debug)]
enum HeadVars {
    Hyperbolic { w: Var, b: Var },
    Euclidean(LinearVars),
}

/// Model parameters bound into a graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    space: ModelSpace,
    dims: ModelDims,
    delta_max: usize,
    horizon: HorizonEncoding,
    enc: [LinearVars; 2],
    agg: RecurrentVars,
    pred: [LinearVars; 2],
    head: HeadVars,
    /// Every parameter leaf in visit order.
    pub params: Vec<Var>,
}

/// Graph outputs of one minibatch.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub loss: Var,
    /// All predictions, one row per `(t, δ, sequence)`.
    pub predictions: Var,
    /// `(t, δ)` of each block of `batch` prediction rows, in row order.
    pub horizons: Vec<(usize, usize)>,
    /// Target embeddings, row `s·N + (step − 1)`.
    pub targets: Var,
}

impl PredictiveModel {
    pub fn new(
        space: ModelSpace,
        dims: ModelDims,
        delta_max: usize,
        horizon: HorizonEncoding,
        seed: u64,
    ) -> Result<Self> {
        if dims.d_in == 0 || dims.d_z == 0 || dims.d_c == 0 {
            return Err(invalid("model dimensions must be positive"));
        }
        if delta_max == 0 {
            return Err(invalid("delta_max must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let horizon_width = match horizon {
            HorizonEncoding::Scalar => 1,
            HorizonEncoding::OneHot => delta_max,
        };
        let encoder = [
            EuclideanLinear::init(dims.d_in, dims.d_c, &mut rng),
            EuclideanLinear::init(dims.d_c, dims.d_z, &mut rng),
        ];
        let aggregator = RecurrentCell::init(dims.d_z, dims.d_c, &mut rng);
        let predictor = [
            EuclideanLinear::init(dims.d_c + horizon_width, dims.d_c, &mut rng),
            EuclideanLinear::init(dims.d_c, dims.d_z, &mut rng),
        ];
        let head = match space {
            ModelSpace::Hyperbolic => {
                Head::Hyperbolic(HyperbolicLinear::init(dims.d_z, dims.d_z, &mut rng))
            }
            ModelSpace::Euclidean => {
                Head::Euclidean(EuclideanLinear::init(dims.d_z, dims.d_z, &mut rng))
            }
        };
        Ok(Self {
            space,
            dims,
            delta_max,
            horizon,
            encoder,
            aggregator,
            predictor,
            head,
        })
    }

    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        let params = self.bind_all(g);
        self.bind_with(params)
    }

    /// Wires already-registered leaves, given in visit order.
    ///
    /// Panics if fewer leaves than parameters are supplied.
    pub fn bind_with(&self, params: Vec<Var>) -> BoundModel {
        let mut it = params.iter().copied();
        let enc = [
            EuclideanLinear::bind_from(&mut it),
            EuclideanLinear::bind_from(&mut it),
        ];
        let agg = RecurrentCell::bind_from(&mut it);
        let pred = [
            EuclideanLinear::bind_from(&mut it),
            EuclideanLinear::bind_from(&mut it),
        ];
        let head = match self.head {
            Head::Hyperbolic(_) => {
                let h = HyperbolicLinear::bind_from(&mut it);
                HeadVars::Hyperbolic { w: h.w, b: h.b }
            }
            Head::Euclidean(_) => HeadVars::Euclidean(EuclideanLinear::bind_from(&mut it)),
        };
        BoundModel {
            space: self.space,
            dims: self.dims,
            delta_max: self.delta_max,
            horizon: self.horizon,
            enc,
            agg,
            pred,
            head,
            params,
        }
    }

    fn eval_rows(
        &self,
        rows: &[Vec<f64>],
        f: impl Fn(&BoundModel, &mut Graph, Var) -> Result<Var>,
    ) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let m = self.bind(&mut g);
        let x = g.constant(Tensor::from_rows(rows)?);
        let y = f(&m, &mut g, x)?;
        Ok(g.value(y).to_rows())
    }

    /// `z = f(x)` for one step's features.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let out = self.eval_rows(&[x.to_vec()], |m, g, x| m.encode(g, x))?;
        Ok(out.into_iter().next().expect("one row"))
    }

    /// `c_t = g(z_1, …, z_t)` folded from the zero state.
    pub fn aggregate(&self, zs: &[Vec<f64>]) -> Result<Vec<f64>> {
        if zs.is_empty() {
            return Err(invalid("aggregate over an empty sequence"));
        }
        let mut c = vec![0.0; self.dims.d_c];
        for z in zs {
            c = self.aggregator.step(&c, z)?;
        }
        Ok(c)
    }

    /// `ẑ_{t+δ} = φ(c_t, δ)` mapped into the loss space.
    pub fn predict(&self, c: &[f64], delta: usize) -> Result<Vec<f64>> {
        if c.len() != self.dims.d_c {
            return Err(invalid(format!(
                "context of dimension {}, expected {}",
                c.len(),
                self.dims.d_c
            )));
        }
        let mut g = Graph::new();
        let m = self.bind(&mut g);
        let c = g.constant(Tensor::from_rows(&[c.to_vec()])?);
        let y = m.predict(&mut g, c, delta)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Encoder output carried through the same head as the predictions.
    pub fn target_embedding(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let out = self.eval_rows(&[x.to_vec()], |m, g, x| m.target(g, x))?;
        Ok(out.into_iter().next().expect("one row"))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims.d_in {
            return Err(invalid(format!(
                "input of dimension {}, expected {}",
                x.len(),
                self.dims.d_in
            )));
        }
        Ok(())
    }

    /// Predictions of the final step from every context `c_t`, `t = 1..N−1`,
    /// for which the horizon `N − t` is within `δ_max`. Returns `(t, ẑ)` pairs
    /// per sequence.
    pub fn final_step_predictions(
        &self,
        sequences: &[Vec<Vec<f64>>],
    ) -> Result<Vec<StepPredictions>> {
        let n = check_sequences(sequences, self.dims.d_in)?;
        let mut g = Graph::new();
        let m = self.bind(&mut g);
        let x = g.constant(stack(sequences)?);
        let contexts = m.contexts(&mut g, x, sequences.len(), n)?;
        let mut out = vec![Vec::new(); sequences.len()];
        for t in 1..n {
            let delta = n - t;
            if delta > self.delta_max {
                continue;
            }
            let p = m.predict(&mut g, contexts[t - 1], delta)?;
            for (s, row) in g.value(p).to_rows().into_iter().enumerate() {
                out[s].push((t, row));
            }
        }
        Ok(out)
    }

    /// Target embeddings of every step, per sequence.
    pub fn target_embeddings(&self, sequences: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<Vec<f64>>>> {
        let n = check_sequences(sequences, self.dims.d_in)?;
        let rows = self.eval_rows(&stack(sequences)?.to_rows(), |m, g, x| m.target(g, x))?;
        Ok(rows.chunks(n).map(<[Vec<f64>]>::to_vec).collect())
    }
}

/// Euclidean norm of a hyperbolic prediction.
pub fn prediction_radius(space: ModelSpace, z: &[f64]) -> Result<f64> {
    match space {
        ModelSpace::Hyperbolic => Ok(norm(z)),
        ModelSpace::Euclidean => Err(Error::UnsupportedMode {
            mode: "euclidean",
            what: "prediction radius".into(),
        }),
    }
}

fn check_sequences(sequences: &[Vec<Vec<f64>>], d_in: usize) -> Result<usize> {
    let n = sequences
        .first()
        .map(Vec::len)
        .ok_or_else(|| invalid("empty batch"))?;
    if n < 2 {
        return Err(invalid("sequences need at least two steps"));
    }
    if sequences
        .iter()
        .any(|s| s.len() != n || s.iter().any(|r| r.len() != d_in))
    {
        return Err(invalid(format!(
            "batch is not a uniform {n} × {d_in} layout"
        )));
    }
    Ok(n)
}

fn stack(sequences: &[Vec<Vec<f64>>]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = sequences.iter().flatten().cloned().collect();
    Tensor::from_rows(&rows)
}

impl BoundModel {
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.enc[0].apply(g, x)?;
        let h = g.tanh(h);
        self.enc[1].apply(g, h)
    }

    /// Maps `m × d_z` Euclidean rows into the loss space.
    pub fn to_loss_space(&self, g: &mut Graph, v: Var) -> Result<Var> {
        match self.head {
            HeadVars::Hyperbolic { w, b } => {
                let p = g.exp0(v);
                let v = g.log0(p);
                let wv = g.linear(v, w, None)?;
                let q = g.exp0(wv);
                g.mobius_add(q, b)
            }
            HeadVars::Euclidean(h) => h.apply(g, v),
        }
    }

    pub fn target(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let z = self.encode(g, x)?;
        self.to_loss_space(g, z)
    }

    /// Contexts `c_1 … c_{N−1}` for a stacked `(B·N) × d_in` input.
    pub fn contexts(&self, g: &mut Graph, x: Var, batch: usize, n: usize) -> Result<Vec<Var>> {
        let z = self.encode(g, x)?;
        self.contexts_from(g, z, batch, n)
    }

    fn contexts_from(&self, g: &mut Graph, z: Var, batch: usize, n: usize) -> Result<Vec<Var>> {
        let mut h = g.constant(Tensor::zeros(&[batch, self.dims.d_c]));
        let mut out = Vec::with_capacity(n - 1);
        for t in 0..n - 1 {
            let idx: Vec<usize> = (0..batch).map(|s| s * n + t).collect();
            let zt = g.select_rows(z, &idx)?;
            h = self.agg.step(g, h, zt)?;
            out.push(h);
        }
        Ok(out)
    }

    fn horizon_features(&self, rows: usize, delta: usize) -> Result<Tensor> {
        match self.horizon {
            HorizonEncoding::Scalar => {
                Tensor::matrix(rows, 1, vec![delta as f64 / self.delta_max as f64; rows])
            }
            HorizonEncoding::OneHot => {
                let mut t = Tensor::zeros(&[rows, self.delta_max]);
                for i in 0..rows {
                    t.row_mut(i)[delta - 1] = 1.0;
                }
                Ok(t)
            }
        }
    }

    /// `φ(c, δ)` followed by the head, for every row of `c`.
    pub fn predict(&self, g: &mut Graph, c: Var, delta: usize) -> Result<Var> {
        if delta == 0 || delta > self.delta_max {
            return Err(invalid(format!(
                "horizon {delta} outside 1..={}",
                self.delta_max
            )));
        }
        let rows = g.value(c).rows();
        let d = g.constant(self.horizon_features(rows, delta)?);
        let input = g.concat_cols(&[c, d])?;
        let h = self.pred[0].apply(g, input)?;
        let h = g.tanh(h);
        let v = self.pred[1].apply(g, h)?;
        self.to_loss_space(g, v)
    }

    /// Contrastive loss over all `(t, δ)` pairs with `t + δ ≤ N`, `δ ≤ δ_max`.
    ///
    /// `x` holds `batch` sequences of `n` steps stacked as `(B·N) × d_in`.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        x: Var,
        batch: usize,
        n: usize,
        temperature: f64,
        stop_target_grad: bool,
    ) -> Result<BatchOutput> {
        let z = self.encode(g, x)?;
        let contexts = self.contexts_from(g, z, batch, n)?;
        let targets = self.to_loss_space(g, z)?;
        let pool = if stop_target_grad {
            g.detach(targets)
        } else {
            targets
        };

        let mut blocks = Vec::new();
        let mut horizons = Vec::new();
        let mut positives = Vec::new();
        for t in 1..n {
            let c = contexts[t - 1];
            for delta in 1..=self.delta_max.min(n - t) {
                blocks.push(self.predict(g, c, delta)?);
                horizons.push((t, delta));
                positives.extend((0..batch).map(|s| s * n + t + delta - 1));
            }
        }
        let predictions = g.concat_rows(&blocks)?;
        let loss = contrastive_loss_var(
            g,
            predictions,
            pool,
            &positives,
            self.space.distance_kind(),
            temperature,
        )?;
        Ok(BatchOutput {
            loss,
            predictions,
            horizons,
            targets,
        })
    }

    pub fn space(&self) -> ModelSpace {
        self.space
    }
}

impl Parameterized for PredictiveModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Space, &Tensor)) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.encoder[0].visit(&p("encoder.0"), f);
        self.encoder[1].visit(&p("encoder.1"), f);
        self.aggregator.visit(&p("aggregator"), f);
        self.predictor[0].visit(&p("predictor.0"), f);
        self.predictor[1].visit(&p("predictor.1"), f);
        match &self.head {
            Head::Hyperbolic(h) => h.visit(&p("head"), f),
            Head::Euclidean(h) => h.visit(&p("head"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Space, &mut Tensor)) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.encoder[0].visit_mut(&p("encoder.0"), f);
        self.encoder[1].visit_mut(&p("encoder.1"), f);
        self.aggregator.visit_mut(&p("aggregator"), f);
        self.predictor[0].visit_mut(&p("predictor.0"), f);
        self.predictor[1].visit_mut(&p("predictor.1"), f);
        match &mut self.head {
            Head::Hyperbolic(h) => h.visit_mut(&p("head"), f),
            Head::Euclidean(h) => h.visit_mut(&p("head"), f),
        }
    }
}

/// `(t, ẑ)` pairs of one sequence, ordered by observed step `t`.
pub type StepPredictions = Vec<(usize, Vec<f64>)>;

/// Ball point from a hyperbolic-mode output row.
pub fn as_point(z: &[f64]) -> Result<PoincarePoint> {
    PoincarePoint::try_from(z.to_vec())
}
