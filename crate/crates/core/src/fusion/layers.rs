//! Network building blocks with explicit forward/backward passes.
//!
//! All math is f64 so analytic gradients can be validated against central
//! finite differences at tight tolerance. Layers cache what their backward
//! pass needs when run in training mode; evaluation-mode forwards are
//! separate `&self` paths that never touch caches, so a trained model can
//! be shared across threads for inference.

use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One trainable tensor with its gradient and first/second Adam moments.
/// Vectors are stored as `[1 x n]`.
#[derive(Debug, Clone)]
pub(crate) struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    pub m: Array2<f64>,
    pub v: Array2<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Array2<f64>) -> Self {
        let shape = value.raw_dim();
        Param {
            name: name.into(),
            value,
            grad: Array2::zeros(shape),
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Glorot-uniform initialization.
pub(crate) fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

/// `[B x T x F]` -> `[B*T x F]` regardless of the source's memory layout
/// (reversed-time views are not standard layout).
pub(crate) fn rows_of(x: &Array3<f64>) -> Array2<f64> {
    let (b, t, f) = x.dim();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * t, f))
        .expect("standard layout reshapes")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fully connected `y = x W + b` over `[B x in]`.
#[derive(Debug, Clone)]
pub(crate) struct Dense {
    pub w: Param,
    pub b: Param,
    cache_x: Option<Array2<f64>>,
}

impl Dense {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, input: usize, output: usize) -> Self {
        Dense {
            w: Param::new(format!("{name}.w"), glorot(rng, input, output)),
            b: Param::new(format!("{name}.b"), Array2::zeros((1, output))),
            cache_x: None,
        }
    }

    pub fn forward_train(&mut self, x: &Array2<f64>) -> Array2<f64> {
        self.cache_x = Some(x.clone());
        self.forward_eval(x)
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.value) + &self.b.value
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let x = self.cache_x.as_ref().expect("forward_train before backward");
        self.w.grad += &x.t().dot(dy);
        self.b.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.value.t())
    }
}

/// Leaky rectifier with slope 0.01 on the negative side.
#[derive(Debug, Clone, Default)]
pub(crate) struct LeakyRelu {
    cache_x: Option<Array2<f64>>,
}

pub(crate) const LEAKY_SLOPE: f64 = 0.01;

impl LeakyRelu {
    pub fn forward_train(&mut self, x: &Array2<f64>) -> Array2<f64> {
        self.cache_x = Some(x.clone());
        self.forward_eval(x)
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        x.mapv(|v| if v >= 0.0 { v } else { LEAKY_SLOPE * v })
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let x = self.cache_x.as_ref().expect("forward_train before backward");
        let mut dx = dy.clone();
        dx.zip_mut_with(x, |d, &v| {
            if v < 0.0 {
                *d *= LEAKY_SLOPE;
            }
        });
        dx
    }
}

struct LstmCache {
    x2d: Array2<f64>,        // [B*T x I], rows b-major
    gates: Vec<Array2<f64>>, // per t, [B x 4U] post-activation (i|f|g|o)
    cells: Vec<Array2<f64>>, // c_t
    tanh_c: Vec<Array2<f64>>,
    hidden: Vec<Array2<f64>>,
}

/// One direction of a sequence-returning LSTM.
pub(crate) struct LstmCell {
    pub wx: Param, // [I x 4U]
    pub wh: Param, // [U x 4U]
    pub b: Param,  // [1 x 4U]
    units: usize,
    cache: Option<LstmCache>,
}

impl LstmCell {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, input: usize, units: usize) -> Self {
        let mut b = Array2::zeros((1, 4 * units));
        // Forget-gate bias starts at 1 so early training does not flush state.
        b.slice_mut(s![0, units..2 * units]).fill(1.0);
        LstmCell {
            wx: Param::new(format!("{name}.wx"), glorot(rng, input, 4 * units)),
            wh: Param::new(format!("{name}.wh"), glorot(rng, units, 4 * units)),
            b: Param::new(format!("{name}.b"), b),
            units,
            cache: None,
        }
    }

    /// Gate math for one timestep. `pre` is `x_t Wx + h_prev Wh + b`.
    fn step(
        pre: &Array2<f64>,
        c_prev: &Array2<f64>,
        units: usize,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let batch = pre.nrows();
        let mut gates = Array2::<f64>::zeros((batch, 4 * units));
        for r in 0..batch {
            for u in 0..units {
                gates[(r, u)] = sigmoid(pre[(r, u)]);
                gates[(r, units + u)] = sigmoid(pre[(r, units + u)]);
                gates[(r, 2 * units + u)] = pre[(r, 2 * units + u)].tanh();
                gates[(r, 3 * units + u)] = sigmoid(pre[(r, 3 * units + u)]);
            }
        }
        let i = gates.slice(s![.., 0..units]);
        let f = gates.slice(s![.., units..2 * units]);
        let g = gates.slice(s![.., 2 * units..3 * units]);
        let c = &f.to_owned() * c_prev + &i.to_owned() * &g.to_owned();
        let tanh_c = c.mapv(f64::tanh);
        (gates, c, tanh_c)
    }

    fn run(
        &self,
        x: &Array3<f64>,
        mut on_step: impl FnMut(usize, &Array2<f64>, &Array2<f64>, &Array2<f64>, &Array2<f64>),
    ) -> Array3<f64> {
        let (batch, t_len, _input) = x.dim();
        let units = self.units;
        let x2d = rows_of(x);
        let pre_x = x2d.dot(&self.wx.value);

        let mut h = Array2::<f64>::zeros((batch, units));
        let mut c = Array2::<f64>::zeros((batch, units));
        let mut out = Array3::<f64>::zeros((batch, t_len, units));
        for t in 0..t_len {
            let mut pre = h.dot(&self.wh.value) + &self.b.value;
            pre += &pre_x.slice(s![t..; t_len, ..]);
            let (gates, c_new, tanh_c) = Self::step(&pre, &c, units);
            let o = gates.slice(s![.., 3 * units..4 * units]).to_owned();
            let h_new = &o * &tanh_c;
            on_step(t, &gates, &c_new, &tanh_c, &h_new);
            out.slice_mut(s![.., t, ..]).assign(&h_new);
            h = h_new;
            c = c_new;
        }
        out
    }

    pub fn forward_train(&mut self, x: &Array3<f64>) -> Array3<f64> {
        let t_len = x.dim().1;
        let mut cache = LstmCache {
            x2d: rows_of(x),
            gates: Vec::with_capacity(t_len),
            cells: Vec::with_capacity(t_len),
            tanh_c: Vec::with_capacity(t_len),
            hidden: Vec::with_capacity(t_len),
        };
        let out = self.run(x, |_, gates, c, tanh_c, h| {
            cache.gates.push(gates.clone());
            cache.cells.push(c.clone());
            cache.tanh_c.push(tanh_c.clone());
            cache.hidden.push(h.clone());
        });
        self.cache = Some(cache);
        out
    }

    pub fn forward_eval(&self, x: &Array3<f64>) -> Array3<f64> {
        self.run(x, |_, _, _, _, _| {})
    }

    pub fn backward(&mut self, dout: &Array3<f64>) -> Array3<f64> {
        let cache = self.cache.take().expect("forward_train before backward");
        let (batch, t_len, units) = dout.dim();
        let zeros = Array2::<f64>::zeros((batch, units));

        let mut dz_all = Array2::<f64>::zeros((batch * t_len, 4 * units));
        let mut dh_next = zeros.clone();
        let mut dc_next = zeros.clone();
        for t in (0..t_len).rev() {
            let gates = &cache.gates[t];
            let i = gates.slice(s![.., 0..units]);
            let f = gates.slice(s![.., units..2 * units]);
            let g = gates.slice(s![.., 2 * units..3 * units]);
            let o = gates.slice(s![.., 3 * units..4 * units]);
            let tanh_c = &cache.tanh_c[t];
            let c_prev = if t == 0 { &zeros } else { &cache.cells[t - 1] };

            let dh = &dout.slice(s![.., t, ..]).to_owned() + &dh_next;
            let dc = &dc_next + &(&dh * &o.to_owned() * tanh_c.mapv(|v| 1.0 - v * v));
            let d_o = &dh * tanh_c;
            let d_i = &dc * &g.to_owned();
            let d_f = &dc * c_prev;
            let d_g = &dc * &i.to_owned();

            let mut dz = Array2::<f64>::zeros((batch, 4 * units));
            dz.slice_mut(s![.., 0..units]).assign(&(&d_i * &i.mapv(|v| v * (1.0 - v))));
            dz.slice_mut(s![.., units..2 * units])
                .assign(&(&d_f * &f.mapv(|v| v * (1.0 - v))));
            dz.slice_mut(s![.., 2 * units..3 * units])
                .assign(&(&d_g * &g.mapv(|v| 1.0 - v * v)));
            dz.slice_mut(s![.., 3 * units..4 * units])
                .assign(&(&d_o * &o.mapv(|v| v * (1.0 - v))));

            if t > 0 {
                self.wh.grad += &cache.hidden[t - 1].t().dot(&dz);
            }
            self.b.grad += &dz.sum_axis(Axis(0)).insert_axis(Axis(0));
            dh_next = dz.dot(&self.wh.value.t());
            dc_next = &dc * &f.to_owned();
            dz_all.slice_mut(s![t..; t_len, ..]).assign(&dz);
        }
        self.wx.grad += &cache.x2d.t().dot(&dz_all);
        let dx2d = dz_all.dot(&self.wx.value.t());
        dx2d
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((batch, t_len, cache.x2d.ncols()))
            .expect("standard layout reshapes")
    }
}

/// Bidirectional, sequence-returning LSTM: forward and reverse passes
/// concatenated along the feature axis to width `2 * units`.
pub(crate) struct BiLstm {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
    units: usize,
}

impl BiLstm {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, input: usize, units: usize) -> Self {
        BiLstm {
            fwd: LstmCell::new(&format!("{name}.fwd"), rng, input, units),
            bwd: LstmCell::new(&format!("{name}.bwd"), rng, input, units),
            units,
        }
    }

    fn reverse_time(x: &Array3<f64>) -> Array3<f64> {
        x.slice(s![.., ..;-1, ..]).as_standard_layout().into_owned()
    }

    pub fn forward_train(&mut self, x: &Array3<f64>) -> Array3<f64> {
        let fwd = self.fwd.forward_train(x);
        let bwd_rev = self.bwd.forward_train(&Self::reverse_time(x));
        Self::join(&fwd, &Self::reverse_time(&bwd_rev))
    }

    pub fn forward_eval(&self, x: &Array3<f64>) -> Array3<f64> {
        let fwd = self.fwd.forward_eval(x);
        let bwd_rev = self.bwd.forward_eval(&Self::reverse_time(x));
        Self::join(&fwd, &Self::reverse_time(&bwd_rev))
    }

    fn join(fwd: &Array3<f64>, bwd: &Array3<f64>) -> Array3<f64> {
        let (batch, t_len, units) = fwd.dim();
        let mut out = Array3::<f64>::zeros((batch, t_len, 2 * units));
        out.slice_mut(s![.., .., 0..units]).assign(fwd);
        out.slice_mut(s![.., .., units..]).assign(bwd);
        out
    }

    pub fn backward(&mut self, dout: &Array3<f64>) -> Array3<f64> {
        let units = self.units;
        let d_fwd = dout.slice(s![.., .., 0..units]).to_owned();
        let d_bwd = dout.slice(s![.., .., units..]).to_owned();
        let dx_f = self.fwd.backward(&d_fwd);
        let dx_b_rev = self.bwd.backward(&Self::reverse_time(&d_bwd));
        &dx_f + &Self::reverse_time(&dx_b_rev)
    }
}

/// Batch normalization over the feature axis; statistics pool batch and
/// time. Inference uses the running averages.
pub(crate) struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array2<f64>, // [1 x F]
    pub running_var: Array2<f64>,
    momentum: f64,
    eps: f64,
    cache: Option<(Array2<f64>, Array2<f64>)>, // (xhat [M x F], inv_std [1 x F])
}

impl BatchNorm {
    pub fn new(name: &str, features: usize) -> Self {
        BatchNorm {
            gamma: Param::new(format!("{name}.gamma"), Array2::ones((1, features))),
            beta: Param::new(format!("{name}.beta"), Array2::zeros((1, features))),
            running_mean: Array2::zeros((1, features)),
            running_var: Array2::ones((1, features)),
            momentum: 0.99,
            eps: 1e-3,
            cache: None,
        }
    }

    pub fn name_prefix(&self) -> String {
        self.gamma.name.trim_end_matches(".gamma").to_string()
    }

    fn to2d(x: &Array3<f64>) -> (Array2<f64>, (usize, usize, usize)) {
        (rows_of(x), x.dim())
    }

    pub fn forward_train(&mut self, x: &Array3<f64>) -> Array3<f64> {
        let (x2, dim) = Self::to2d(x);
        let mean = x2.mean_axis(Axis(0)).expect("rows > 0").insert_axis(Axis(0));
        let centered = &x2 - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("rows > 0").insert_axis(Axis(0));
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = &centered * &inv_std;
        let y = &xhat * &self.gamma.value + &self.beta.value;

        self.running_mean = &self.running_mean * self.momentum + &(&mean * (1.0 - self.momentum));
        self.running_var = &self.running_var * self.momentum + &(&var * (1.0 - self.momentum));
        self.cache = Some((xhat, inv_std));
        y.into_shape_with_order(dim).expect("contiguous reshape")
    }

    pub fn forward_eval(&self, x: &Array3<f64>) -> Array3<f64> {
        let (x2, dim) = Self::to2d(x);
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let y = (&x2 - &self.running_mean) * &inv_std * &self.gamma.value + &self.beta.value;
        y.into_shape_with_order(dim).expect("contiguous reshape")
    }

    pub fn backward(&mut self, dy: &Array3<f64>) -> Array3<f64> {
        let (dy2, dim) = Self::to2d(dy);
        let (xhat, inv_std) = self.cache.take().expect("forward_train before backward");
        let m = dy2.nrows() as f64;

        self.gamma.grad += &(&dy2 * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.beta.grad += &dy2.sum_axis(Axis(0)).insert_axis(Axis(0));

        let dxhat = &dy2 * &self.gamma.value;
        let sum_dxhat = dxhat.sum_axis(Axis(0)).insert_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        let dx = (&dxhat * m - &sum_dxhat - &xhat * &sum_dxhat_xhat) * &inv_std / m;
        dx.into_shape_with_order(dim).expect("contiguous reshape")
    }
}

/// Inverted dropout; identity when evaluating or when the rate is zero.
pub(crate) struct Dropout {
    pub rate: f64,
    mask: Option<Array3<f64>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        Dropout { rate, mask: None }
    }

    pub fn forward_train(&mut self, x: &Array3<f64>, rng: &mut ChaCha8Rng) -> Array3<f64> {
        if self.rate <= 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = 1.0 - self.rate;
        let mask = Array3::from_shape_fn(x.dim(), |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let y = x * &mask;
        self.mask = Some(mask);
        y
    }

    pub fn forward_eval(&self, x: &Array3<f64>) -> Array3<f64> {
        x.clone()
    }

    pub fn backward(&mut self, dy: &Array3<f64>) -> Array3<f64> {
        match self.mask.take() {
            Some(mask) => dy * &mask,
            None => dy.clone(),
        }
    }
}

/// Repeat-then-project: a flat vector is conceptually repeated for every
/// timestep and passed through a per-timestep affine layer. Because every
/// timestep sees the same input, the projection is computed once and
/// broadcast; gradients sum over timesteps. Input gradients are not needed
/// (inputs are raw features), so backward only accumulates parameter
/// gradients.
pub(crate) struct RepeatedDense {
    pub w: Param, // [D x F]
    pub b: Param, // [1 x F]
    t_len: usize,
    cache_x: Option<Array2<f64>>,
}

impl RepeatedDense {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, input: usize, output: usize, t_len: usize) -> Self {
        RepeatedDense {
            w: Param::new(format!("{name}.w"), glorot(rng, input, output)),
            b: Param::new(format!("{name}.b"), Array2::zeros((1, output))),
            t_len,
            cache_x: None,
        }
    }

    fn project(&self, x: &Array2<f64>) -> Array3<f64> {
        let row = x.dot(&self.w.value) + &self.b.value; // [B x F]
        let (batch, features) = row.dim();
        let mut out = Array3::<f64>::zeros((batch, self.t_len, features));
        for t in 0..self.t_len {
            out.slice_mut(s![.., t, ..]).assign(&row);
        }
        out
    }

    pub fn forward_train(&mut self, x: &Array2<f64>) -> Array3<f64> {
        self.cache_x = Some(x.clone());
        self.project(x)
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> Array3<f64> {
        self.project(x)
    }

    pub fn backward(&mut self, dy: &Array3<f64>) {
        let x = self.cache_x.take().expect("forward_train before backward");
        let drow = dy.sum_axis(Axis(1)); // [B x F]
        self.w.grad += &x.t().dot(&drow);
        self.b.grad += &drow.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
}

/// Concatenates two `[B x T x *]` tensors along the feature axis.
pub(crate) fn concat_features(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    let (batch, t_len, fa) = a.dim();
    let fb = b.dim().2;
    let mut out = Array3::<f64>::zeros((batch, t_len, fa + fb));
    out.slice_mut(s![.., .., 0..fa]).assign(a);
    out.slice_mut(s![.., .., fa..]).assign(b);
    out
}

/// Splits a feature-axis gradient back into the two concatenated parts.
pub(crate) fn split_features(d: &Array3<f64>, fa: usize) -> (Array3<f64>, Array3<f64>) {
    (d.slice(s![.., .., 0..fa]).to_owned(), d.slice(s![.., .., fa..]).to_owned())
}

pub(crate) fn flatten(x: &Array3<f64>) -> Array2<f64> {
    let (batch, t_len, features) = x.dim();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((batch, t_len * features))
        .expect("standard layout reshapes")
}

pub(crate) fn unflatten(x: &Array2<f64>, t_len: usize, features: usize) -> Array3<f64> {
    let batch = x.nrows();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((batch, t_len, features))
        .expect("standard layout reshapes")
}
