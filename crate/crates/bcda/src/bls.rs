//! The broad critic network: random tanh feature and enhancement nodes with
//! ridge-fit linear output weights.
//!
//! Accuracy is improved by widening the network rather than deepening it:
//! new nodes are appended as columns of the design matrix and the output
//! weights are carried along by the pseudoinverse block update in
//! [`crate::numerics::pinv_append_columns`], so growth never refits from
//! scratch. The exact input Jacobian is available for policy-gradient use.

use crate::error::{Error, Result};
use crate::numerics::{
    gram_factor, pinv_append_columns, pinv_from_factor, SpdFactor,
};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

/// Requested node growth. At least one of the two counts must be non-zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlsGrowthPlan {
    pub add_feature: usize,
    pub add_enhance: usize,
}

impl BlsGrowthPlan {
    pub fn new(add_feature: usize, add_enhance: usize) -> Result<Self> {
        if add_feature == 0 && add_enhance == 0 {
            return Err(Error::Config("growth plan adds no nodes".into()));
        }
        Ok(BlsGrowthPlan {
            add_feature,
            add_enhance,
        })
    }
}

/// Fit statistics returned by training and growth operations.
#[derive(Debug, Clone, Copy)]
pub struct FitReport {
    /// Root mean squared residual of the fitted outputs against the targets.
    pub rmse: f64,
}

// Pseudoinverse of the cached design matrix. Right after a fit only the Gram
// factorization is kept; the full pseudoinverse is materialized the first
// time growth needs it. After a growth step the updated pseudoinverse is
// held directly.
enum PinvState {
    Factor(SpdFactor),
    Materialized(Array2<f64>),
}

struct FitCache {
    x: Array2<f64>,
    y: Array2<f64>,
    a: Array2<f64>,
    pinv: PinvState,
}

impl FitCache {
    fn pinv(&mut self) -> Result<&Array2<f64>> {
        if let PinvState::Factor(factor) = &self.pinv {
            let m = pinv_from_factor(factor, &self.a.view())?;
            self.pinv = PinvState::Materialized(m);
        }
        match &self.pinv {
            PinvState::Materialized(m) => Ok(m),
            PinvState::Factor(_) => unreachable!(),
        }
    }
}

/// Broad network with frozen random hidden weights and learned output weights.
pub struct BlsNet {
    input_dim: usize,
    out_dim: usize,
    n_feature: usize,
    m_enhance: usize,
    w_f: Array2<f64>,
    beta_f: Array1<f64>,
    w_e: Array2<f64>,
    beta_e: Array1<f64>,
    w_out: Array2<f64>,
    shrinkage: f64,
    lambda: f64,
    cache: Option<FitCache>,
}

impl BlsNet {
    /// Fresh network with hidden weights drawn i.i.d. uniform on [-1, 1];
    /// enhancement weights are scaled by the shrinkage coefficient at
    /// generation time. Output weights start at zero.
    pub fn init<R: Rng>(
        input_dim: usize,
        out_dim: usize,
        n_feature: usize,
        m_enhance: usize,
        shrinkage: f64,
        lambda: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || out_dim == 0 || n_feature == 0 || m_enhance == 0 {
            return Err(Error::Config("bls dimensions must all be >= 1".into()));
        }
        if !(shrinkage > 0.0 && shrinkage <= 1.0) {
            return Err(Error::Config(format!("shrinkage must be in (0, 1], got {shrinkage}")));
        }
        if !(lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
        }
        let w_f = draw_uniform(rng, input_dim, n_feature, 1.0);
        let beta_f = draw_uniform_vec(rng, n_feature, 1.0);
        let w_e = draw_uniform(rng, n_feature, m_enhance, shrinkage);
        let beta_e = draw_uniform_vec(rng, m_enhance, 1.0);
        Ok(BlsNet {
            input_dim,
            out_dim,
            n_feature,
            m_enhance,
            w_f,
            beta_f,
            w_e,
            beta_e,
            w_out: Array2::zeros((n_feature + m_enhance, out_dim)),
            shrinkage,
            lambda,
            cache: None,
        })
    }

    /// Reassembles a network from explicit components (deserialization and
    /// the from-scratch refit oracle both need this).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        w_f: Array2<f64>,
        beta_f: Array1<f64>,
        w_e: Array2<f64>,
        beta_e: Array1<f64>,
        w_out: Array2<f64>,
        shrinkage: f64,
        lambda: f64,
    ) -> Result<Self> {
        let (input_dim, n_feature) = w_f.dim();
        let (we_rows, m_enhance) = w_e.dim();
        if beta_f.len() != n_feature
            || we_rows != n_feature
            || beta_e.len() != m_enhance
            || w_out.nrows() != n_feature + m_enhance
        {
            return Err(Error::dims(
                "bls from_parts",
                format!("consistent shapes for n={n_feature}, m={m_enhance}"),
                format!(
                    "beta_f={}, w_e rows={}, beta_e={}, w_out rows={}",
                    beta_f.len(),
                    we_rows,
                    beta_e.len(),
                    w_out.nrows()
                ),
            ));
        }
        let out_dim = w_out.ncols();
        Ok(BlsNet {
            input_dim,
            out_dim,
            n_feature,
            m_enhance,
            w_f,
            beta_f,
            w_e,
            beta_e,
            w_out,
            shrinkage,
            lambda,
            cache: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }
    pub fn n_feature(&self) -> usize {
        self.n_feature
    }
    pub fn m_enhance(&self) -> usize {
        self.m_enhance
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn shrinkage(&self) -> f64 {
        self.shrinkage
    }
    pub fn feature_weights(&self) -> (&Array2<f64>, &Array1<f64>) {
        (&self.w_f, &self.beta_f)
    }
    pub fn enhancement_weights(&self) -> (&Array2<f64>, &Array1<f64>) {
        (&self.w_e, &self.beta_e)
    }
    pub fn output_weights(&self) -> &Array2<f64> {
        &self.w_out
    }
    pub fn has_growth_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Companion enhancement count used when growing feature nodes: the
    /// current enhancement-to-feature ratio applied to the new features.
    pub fn companion_enhancement_count(&self, q: usize) -> usize {
        ((q * self.m_enhance) as f64 / self.n_feature as f64).round() as usize
    }

    fn feature_block(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim {
            return Err(Error::dims("bls input", self.input_dim, x.ncols()));
        }
        let mut z = x.dot(&self.w_f);
        z += &self.beta_f;
        z.mapv_inplace(f64::tanh);
        Ok(z)
    }

    fn enhancement_block(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut h = z.dot(&self.w_e);
        h += &self.beta_e;
        h.mapv_inplace(f64::tanh);
        h
    }

    /// Stacks feature and enhancement activations into the design matrix
    /// `[Z | H]`, one row per input row.
    pub fn build_design_matrix(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let z = self.feature_block(x)?;
        let h = self.enhancement_block(&z);
        let mut a = Array2::zeros((x.nrows(), self.n_feature + self.m_enhance));
        a.slice_mut(s![.., 0..self.n_feature]).assign(&z);
        a.slice_mut(s![.., self.n_feature..]).assign(&h);
        Ok(a)
    }

    /// Network output: design matrix times output weights.
    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.build_design_matrix(x)?.dot(&self.w_out))
    }

    /// Fits the output weights on `(x, y)` by ridge regression and retains
    /// the design matrix and its Gram factorization so the network can be
    /// grown against this batch.
    pub fn fit_output_weights(
        &mut self,
        x: &ArrayView2<f64>,
        y: &ArrayView2<f64>,
    ) -> Result<FitReport> {
        if y.nrows() != x.nrows() {
            return Err(Error::dims("bls fit rows", x.nrows(), y.nrows()));
        }
        if y.ncols() != self.out_dim {
            return Err(Error::dims("bls fit targets", self.out_dim, y.ncols()));
        }
        let a = self.build_design_matrix(x)?;
        let factor = gram_factor(&a.view(), self.lambda)?;
        let rhs = a.t().dot(y);
        self.w_out = factor.solve(&rhs.view())?;
        let rmse = rmse_of(&a, &self.w_out, y);
        self.cache = Some(FitCache {
            x: x.to_owned(),
            y: y.to_owned(),
            a,
            pinv: PinvState::Factor(factor),
        });
        Ok(FitReport { rmse })
    }

    fn take_cache_for(
        &mut self,
        x: &ArrayView2<f64>,
        y: &ArrayView2<f64>,
    ) -> Result<FitCache> {
        let cache = self
            .cache
            .take()
            .ok_or(Error::StaleCache("grow called before fit_output_weights"))?;
        if cache.x != *x || cache.y != *y {
            self.cache = None;
            return Err(Error::StaleCache(
                "growth batch differs from the batch of the last fit",
            ));
        }
        Ok(cache)
    }

    /// Appends `q` enhancement nodes wired to all current feature nodes and
    /// carries the output weights and cached pseudoinverse along.
    pub fn add_enhancement_nodes<R: Rng>(
        &mut self,
        q: usize,
        x: &ArrayView2<f64>,
        y: &ArrayView2<f64>,
        rng: &mut R,
    ) -> Result<FitReport> {
        if q == 0 {
            return Err(Error::Config("enhancement growth of zero nodes".into()));
        }
        let mut cache = self.take_cache_for(x, y)?;
        let w_e_new = draw_uniform(rng, self.n_feature, q, self.shrinkage);
        let beta_e_new = draw_uniform_vec(rng, q, 1.0);

        let z = cache.a.slice(s![.., 0..self.n_feature]);
        let mut h_new = z.dot(&w_e_new);
        h_new += &beta_e_new;
        h_new.mapv_inplace(f64::tanh);

        let pinv = cache.pinv()?.clone();
        let update = pinv_append_columns(&cache.a.view(), &pinv.view(), &h_new.view(), self.lambda)?;
        let bty = update.b_t.dot(y);
        let mut w_new = Array2::zeros((self.w_out.nrows() + q, self.out_dim));
        {
            let mut top = w_new.slice_mut(s![0..self.w_out.nrows(), ..]);
            top.assign(&self.w_out);
            top.scaled_add(-1.0, &update.d.dot(&bty));
        }
        w_new.slice_mut(s![self.w_out.nrows().., ..]).assign(&bty);

        self.w_e = concat_cols(&self.w_e, &w_e_new);
        self.beta_e = concat_vec(&self.beta_e, &beta_e_new);
        self.m_enhance += q;
        self.w_out = w_new;
        let a_new = concat_cols(&cache.a, &h_new);
        let rmse = rmse_of(&a_new, &self.w_out, y);
        self.cache = Some(FitCache {
            x: cache.x,
            y: cache.y,
            a: a_new,
            pinv: PinvState::Materialized(update.a_pinv_new),
        });
        Ok(FitReport { rmse })
    }

    /// Appends `q` feature nodes plus companion enhancement nodes keeping the
    /// network's enhancement-to-feature ratio.
    pub fn add_feature_nodes<R: Rng>(
        &mut self,
        q: usize,
        x: &ArrayView2<f64>,
        y: &ArrayView2<f64>,
        rng: &mut R,
    ) -> Result<FitReport> {
        let ex = self.companion_enhancement_count(q);
        self.add_feature_nodes_with(q, ex, x, y, rng)
    }

    /// Appends `q` feature nodes and exactly `ex_count` companion enhancement
    /// nodes wired only to the new features. The design matrix stays in
    /// canonical `[Z | H]` order: the freshly appended columns are permuted
    /// into place along with the output weights and cached pseudoinverse.
    pub fn add_feature_nodes_with<R: Rng>(
        &mut self,
        q: usize,
        ex_count: usize,
        x: &ArrayView2<f64>,
        y: &ArrayView2<f64>,
        rng: &mut R,
    ) -> Result<FitReport> {
        if q == 0 {
            return Err(Error::Config("feature growth of zero nodes".into()));
        }
        let mut cache = self.take_cache_for(x, y)?;
        let w_f_new = draw_uniform(rng, self.input_dim, q, 1.0);
        let beta_f_new = draw_uniform_vec(rng, q, 1.0);
        let mut z_new = x.dot(&w_f_new);
        z_new += &beta_f_new;
        z_new.mapv_inplace(f64::tanh);

        let (w_ex, beta_ex, h_ex) = if ex_count > 0 {
            let w_ex = draw_uniform(rng, q, ex_count, self.shrinkage);
            let beta_ex = draw_uniform_vec(rng, ex_count, 1.0);
            let mut h_ex = z_new.dot(&w_ex);
            h_ex += &beta_ex;
            h_ex.mapv_inplace(f64::tanh);
            (w_ex, beta_ex, h_ex)
        } else {
            (
                Array2::zeros((q, 0)),
                Array1::zeros(0),
                Array2::zeros((x.nrows(), 0)),
            )
        };

        let block = concat_cols(&z_new, &h_ex);
        let pinv = cache.pinv()?.clone();
        let update = pinv_append_columns(&cache.a.view(), &pinv.view(), &block.view(), self.lambda)?;
        let bty = update.b_t.dot(y);
        let rows = self.w_out.nrows();
        let mut w_new = Array2::zeros((rows + q + ex_count, self.out_dim));
        {
            let mut top = w_new.slice_mut(s![0..rows, ..]);
            top.assign(&self.w_out);
            top.scaled_add(-1.0, &update.d.dot(&bty));
        }
        w_new.slice_mut(s![rows.., ..]).assign(&bty);

        // Appended layout is [Z_old | H_old | Z_new | H_ex]; restore [Z | H].
        let order = canonical_order(self.n_feature, self.m_enhance, q, ex_count);
        let a_appended = concat_cols(&cache.a, &block);
        let a_new = select_cols(&a_appended, &order);
        let w_out_new = select_rows(&w_new, &order);
        let pinv_new = select_rows(&update.a_pinv_new, &order);

        self.w_f = concat_cols(&self.w_f, &w_f_new);
        self.beta_f = concat_vec(&self.beta_f, &beta_f_new);
        // Old enhancements ignore the new features; companions see only them.
        let mut w_e_new = Array2::zeros((self.n_feature + q, self.m_enhance + ex_count));
        w_e_new
            .slice_mut(s![0..self.n_feature, 0..self.m_enhance])
            .assign(&self.w_e);
        if ex_count > 0 {
            w_e_new
                .slice_mut(s![self.n_feature.., self.m_enhance..])
                .assign(&w_ex);
        }
        self.w_e = w_e_new;
        self.beta_e = concat_vec(&self.beta_e, &beta_ex);
        self.n_feature += q;
        self.m_enhance += ex_count;
        self.w_out = w_out_new;
        let rmse = rmse_of(&a_new, &self.w_out, y);
        self.cache = Some(FitCache {
            x: cache.x,
            y: cache.y,
            a: a_new,
            pinv: PinvState::Materialized(pinv_new),
        });
        Ok(FitReport { rmse })
    }

    /// Exact Jacobian of the network output with respect to one input point,
    /// shape `out_dim x input_dim`.
    pub fn input_gradient(&self, x: &ArrayView1<f64>) -> Result<Array2<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::dims("bls input_gradient", self.input_dim, x.len()));
        }
        let xb = x.view().insert_axis(Axis(0));
        let z = self.feature_block(&xb)?;
        let h = self.enhancement_block(&z);
        let dz = z.mapv(|v| 1.0 - v * v);
        let dh = h.mapv(|v| 1.0 - v * v);

        let w_z = self.w_out.slice(s![0..self.n_feature, ..]);
        let w_h = self.w_out.slice(s![self.n_feature.., ..]);

        // g_z[k, j] = dY_k/dZ_j, combining the direct path and the path
        // through the enhancement layer.
        let mut g_z = w_z.t().to_owned();
        let g_h = w_h.t().to_owned() * &dh; // k x m, scaled by tanh' at H
        g_z += &g_h.dot(&self.w_e.t());
        g_z *= &dz;
        Ok(g_z.dot(&self.w_f.t()))
    }

    /// Batched input gradients for scalar-output networks: row `i` holds
    /// `d y(x_i) / d x_i`.
    pub fn input_gradient_rows(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if self.out_dim != 1 {
            return Err(Error::dims("input_gradient_rows out_dim", 1, self.out_dim));
        }
        let z = self.feature_block(x)?;
        let h = self.enhancement_block(&z);
        let dz = z.mapv(|v| 1.0 - v * v);
        let dh = h.mapv(|v| 1.0 - v * v);
        let w_z = self.w_out.slice(s![0..self.n_feature, 0]);
        let w_h = self.w_out.slice(s![self.n_feature.., 0]);

        // Per row: (w_z * dz + ((w_h * dh) W_e^T) * dz) W_f^T
        let mut g = dz.clone();
        g *= &w_z.view().insert_axis(Axis(0));
        let mut through = dh;
        through *= &w_h.view().insert_axis(Axis(0));
        let mut back = through.dot(&self.w_e.t());
        back *= &dz;
        g += &back;
        Ok(g.dot(&self.w_f.t()))
    }

    /// Blends this network's output weights toward the source's:
    /// `W <- rho W + (1 - rho) W_src`. Frozen weights are untouched and must
    /// already agree.
    pub fn polyak_output_weights(&mut self, source: &BlsNet, rho: f64) -> Result<()> {
        if self.w_out.dim() != source.w_out.dim() {
            return Err(Error::dims(
                "polyak output weights",
                format!("{:?}", self.w_out.dim()),
                format!("{:?}", source.w_out.dim()),
            ));
        }
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Config(format!("rho must be in [0, 1], got {rho}")));
        }
        self.w_out.zip_mut_with(&source.w_out, |t, s| {
            *t = rho * *t + (1.0 - rho) * s;
        });
        Ok(())
    }

    /// Adopts structural growth from `source`: copies the (extended) frozen
    /// weights and splices the source's new output-weight rows into this
    /// network while keeping its own rows for pre-existing nodes.
    pub fn sync_growth_from(&mut self, source: &BlsNet, prev_n: usize, prev_m: usize) -> Result<()> {
        if self.n_feature != prev_n || self.m_enhance != prev_m {
            return Err(Error::dims(
                "sync_growth_from target",
                format!("{prev_n}/{prev_m}"),
                format!("{}/{}", self.n_feature, self.m_enhance),
            ));
        }
        if source.n_feature < prev_n || source.m_enhance < prev_m {
            return Err(Error::dims(
                "sync_growth_from source",
                format!(">= {prev_n}/{prev_m}"),
                format!("{}/{}", source.n_feature, source.m_enhance),
            ));
        }
        let (n2, m2) = (source.n_feature, source.m_enhance);
        let mut w_out = Array2::zeros((n2 + m2, self.out_dim));
        w_out
            .slice_mut(s![0..prev_n, ..])
            .assign(&self.w_out.slice(s![0..prev_n, ..]));
        w_out
            .slice_mut(s![prev_n..n2, ..])
            .assign(&source.w_out.slice(s![prev_n..n2, ..]));
        w_out
            .slice_mut(s![n2..n2 + prev_m, ..])
            .assign(&self.w_out.slice(s![prev_n..prev_n + prev_m, ..]));
        w_out
            .slice_mut(s![n2 + prev_m.., ..])
            .assign(&source.w_out.slice(s![n2 + prev_m.., ..]));
        self.w_f = source.w_f.clone();
        self.beta_f = source.beta_f.clone();
        self.w_e = source.w_e.clone();
        self.beta_e = source.beta_e.clone();
        self.n_feature = n2;
        self.m_enhance = m2;
        self.w_out = w_out;
        self.cache = None;
        Ok(())
    }

    /// Replaces the learned output weights directly (the recursive
    /// accumulation mode solves for them outside this struct).
    pub fn set_output_weights(&mut self, w_out: Array2<f64>) -> Result<()> {
        if w_out.dim() != self.w_out.dim() {
            return Err(Error::dims(
                "set_output_weights",
                format!("{:?}", self.w_out.dim()),
                format!("{:?}", w_out.dim()),
            ));
        }
        self.w_out = w_out;
        self.cache = None;
        Ok(())
    }

    /// Writes the network as a flat binary image: header scalars, then each
    /// weight matrix row-major as 64-bit little-endian reals.
    pub fn write_to<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        use crate::io;
        io::write_magic(w, b"BCN1")?;
        io::write_f64(w, self.shrinkage)?;
        io::write_f64(w, self.lambda)?;
        io::write_matrix(w, &self.w_f)?;
        io::write_vector(w, &self.beta_f)?;
        io::write_matrix(w, &self.w_e)?;
        io::write_vector(w, &self.beta_e)?;
        io::write_matrix(w, &self.w_out)?;
        Ok(())
    }

    pub fn read_from<R: std::io::Read>(r: &mut R) -> Result<Self> {
        use crate::io;
        io::read_magic(r, b"BCN1")?;
        let shrinkage = io::read_f64(r)?;
        let lambda = io::read_f64(r)?;
        let w_f = io::read_matrix(r)?;
        let beta_f = io::read_vector(r)?;
        let w_e = io::read_matrix(r)?;
        let beta_e = io::read_vector(r)?;
        let w_out = io::read_matrix(r)?;
        Self::from_parts(w_f, beta_f, w_e, beta_e, w_out, shrinkage, lambda)
    }

    /// Deep copy sharing no storage; the growth cache is not carried over.
    pub fn clone_untrained_cache(&self) -> BlsNet {
        BlsNet {
            input_dim: self.input_dim,
            out_dim: self.out_dim,
            n_feature: self.n_feature,
            m_enhance: self.m_enhance,
            w_f: self.w_f.clone(),
            beta_f: self.beta_f.clone(),
            w_e: self.w_e.clone(),
            beta_e: self.beta_e.clone(),
            w_out: self.w_out.clone(),
            shrinkage: self.shrinkage,
            lambda: self.lambda,
            cache: None,
        }
    }
}

fn canonical_order(n: usize, m: usize, q: usize, ex: usize) -> Vec<usize> {
    let p = n + m;
    let mut order = Vec::with_capacity(p + q + ex);
    order.extend(0..n); // old features
    order.extend(p..p + q); // new features
    order.extend(n..n + m); // old enhancements
    order.extend(p + q..p + q + ex); // companion enhancements
    order
}

fn select_cols(m: &Array2<f64>, order: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((m.nrows(), order.len()));
    for (dst, &src) in order.iter().enumerate() {
        out.column_mut(dst).assign(&m.column(src));
    }
    out
}

fn select_rows(m: &Array2<f64>, order: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((order.len(), m.ncols()));
    for (dst, &src) in order.iter().enumerate() {
        out.row_mut(dst).assign(&m.row(src));
    }
    out
}

fn concat_cols(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate![Axis(1), a.view(), b.view()]
}

fn concat_vec(a: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    ndarray::concatenate![Axis(0), a.view(), b.view()]
}

fn draw_uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.random_range(-1.0..1.0))
}

fn draw_uniform_vec<R: Rng>(rng: &mut R, len: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| scale * rng.random_range(-1.0..1.0))
}

fn rmse_of(a: &Array2<f64>, w: &Array2<f64>, y: &ArrayView2<f64>) -> f64 {
    let resid = &a.dot(w) - y;
    (resid.iter().map(|v| v * v).sum::<f64>() / resid.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LAMBDA: f64 = 9.313225746154785e-10; // 2^-30

    fn uniform_inputs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    fn smooth_targets(x: &Array2<f64>) -> Array2<f64> {
        let mut y = Array2::zeros((x.nrows(), 1));
        for (i, row) in x.rows().into_iter().enumerate() {
            let s: f64 = row.sum();
            y[[i, 0]] = (2.0 * s).sin() + 0.3 * (3.0 * row[0]).cos();
        }
        y
    }

    #[test]
    fn init_shapes_and_shrinkage() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = BlsNet::init(5, 1, 10, 500, 0.8, LAMBDA, &mut rng).unwrap();
        assert_eq!(net.output_weights().nrows(), 510);
        let (w_e, _) = net.enhancement_weights();
        let max_we = w_e.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(max_we <= 0.8);
        assert!(net.output_weights().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = BlsNet::init(3, 1, 4, 6, 0.8, LAMBDA, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = BlsNet::init(3, 1, 4, 6, 0.8, LAMBDA, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.w_f, b.w_f);
        assert_eq!(a.beta_f, b.beta_f);
        assert_eq!(a.w_e, b.w_e);
        assert_eq!(a.beta_e, b.beta_e);
    }

    #[test]
    fn design_matrix_zero_input_zero_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = BlsNet::init(2, 1, 3, 4, 0.8, LAMBDA, &mut rng).unwrap();
        net.beta_f.fill(0.0);
        net.beta_e.fill(0.0);
        let x = Array2::zeros((1, 2));
        let a = net.build_design_matrix(&x.view()).unwrap();
        assert!(a.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn design_matrix_matches_hand_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = BlsNet::init(1, 1, 1, 1, 1.0, LAMBDA, &mut rng).unwrap();
        net.w_f[[0, 0]] = 0.7;
        net.beta_f[0] = -0.2;
        net.w_e[[0, 0]] = 0.5;
        net.beta_e[0] = 0.1;
        let x = array![[0.3]];
        let a = net.build_design_matrix(&x.view()).unwrap();
        let z = (0.3_f64 * 0.7 - 0.2).tanh();
        let h = (z * 0.5 + 0.1).tanh();
        assert!((a[[0, 0]] - z).abs() < 1e-12);
        assert!((a[[0, 1]] - h).abs() < 1e-12);
    }

    #[test]
    fn design_matrix_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = BlsNet::init(5, 1, 10, 500, 0.8, LAMBDA, &mut rng).unwrap();
        let x = uniform_inputs(&mut rng, 64, 5);
        assert_eq!(net.build_design_matrix(&x.view()).unwrap().dim(), (64, 510));
    }

    #[test]
    fn forward_zero_weights_and_row_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = BlsNet::init(3, 1, 5, 7, 0.8, LAMBDA, &mut rng).unwrap();
        let x = uniform_inputs(&mut rng, 6, 3);
        assert!(net.forward(&x.view()).unwrap().iter().all(|v| *v == 0.0));
        let y = smooth_targets(&x);
        net.fit_output_weights(&x.view(), &y.view()).unwrap();
        let batch = net.forward(&x.view()).unwrap();
        let single = net.forward(&x.slice(s![2..3, ..])).unwrap();
        assert_eq!(batch[[2, 0]], single[[0, 0]]);
    }

    #[test]
    fn fit_zero_targets_gives_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = BlsNet::init(3, 1, 5, 7, 0.8, LAMBDA, &mut rng).unwrap();
        let x = uniform_inputs(&mut rng, 12, 3);
        let y = Array2::zeros((12, 1));
        let report = net.fit_output_weights(&x.view(), &y.view()).unwrap();
        assert_eq!(report.rmse, 0.0);
        assert!(net.output_weights().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fit_recovers_realizable_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = BlsNet::init(4, 2, 6, 10, 0.8, LAMBDA, &mut rng).unwrap();
        let x = uniform_inputs(&mut rng, 40, 4);
        let a = net.build_design_matrix(&x.view()).unwrap();
        let w_true = uniform_inputs(&mut rng, 16, 2);
        let y = a.dot(&w_true);
        let report = net.fit_output_weights(&x.view(), &y.view()).unwrap();
        assert!(report.rmse < 1e-6, "rmse {}", report.rmse);
    }

    #[test]
    fn fit_sine_mixture_with_base_network() {
        // 10 feature / 500 enhancement nodes, shrinkage 0.8, lambda 2^-30.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut net = BlsNet::init(1, 1, 10, 500, 0.8, LAMBDA, &mut rng).unwrap();
        let x = uniform_inputs(&mut rng, 500, 1);
        let mut y = Array2::zeros((500, 1));
        for i in 0..500 {
            y[[i, 0]] = (3.0 * x[[i, 0]]).sin() + 0.5 * (7.0 * x[[i, 0]]).cos();
        }
        let report = net.fit_output_weights(&x.view(), &y.view()).unwrap();
        assert!(report.rmse < 0.01, "rmse {}", report.rmse);
    }

    #[test]
    fn growth_requires_fresh_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = BlsNet::init(3, 1, 4, 8, 0.8, LAMBDA, &mut rng).unwrap();
        let x = uniform_inputs(&mut rng, 20, 3);
        let y = smooth_targets(&x);
        let err = net.add_enhancement_nodes(2, &x.view(), &y.view(), &mut rng);
        assert!(matches!(err, Err(Error::StaleCache(_))));
        net.fit_output_weights(&x.view(), &y.view()).unwrap();
        let other = uniform_inputs(&mut rng, 20, 3);
        let err = net.add_enhancement_nodes(2, &other.view(), &y.view(), &mut rng);
        assert!(matches!(err, Err(Error::StaleCache(_))));
    }

    #[test]
    fn growth_plan_rejects_empty() {
        assert!(BlsGrowthPlan::new(0, 0).is_err());
        assert!(BlsGrowthPlan::new(1, 0).is_ok());
    }

    #[test]
    fn scheme_two_budget_reaches_paper_node_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = BlsNet::init(5, 1, 10, 500, 0.8, LAMBDA, &mut rng).unwrap();
        let x = uniform_inputs(&mut rng, 64, 5);
        let y = smooth_targets(&x);
        net.fit_output_weights(&x.view(), &y.view()).unwrap();
        for _ in 0..5 {
            net.add_feature_nodes_with(1, 0, &x.view(), &y.view(), &mut rng).unwrap();
            net.add_enhancement_nodes(20, &x.view(), &y.view(), &mut rng).unwrap();
        }
        assert_eq!((net.n_feature(), net.m_enhance()), (15, 600));
    }

    #[test]
    fn companion_count_follows_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let net = BlsNet::init(5, 1, 10, 500, 0.8, LAMBDA, &mut rng).unwrap();
        assert_eq!(net.companion_enhancement_count(1), 50);
        assert_eq!(net.companion_enhancement_count(5), 250);
    }

    fn from_scratch_refit(net: &BlsNet, x: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
        let mut fresh = BlsNet::from_parts(
            net.w_f.clone(),
            net.beta_f.clone(),
            net.w_e.clone(),
            net.beta_e.clone(),
            Array2::zeros(net.w_out.dim()),
            net.shrinkage,
            net.lambda,
        )
        .unwrap();
        fresh.fit_output_weights(&x.view(), &y.view()).unwrap();
        fresh.forward(&x.view()).unwrap()
    }

    fn pred_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let diff = a - b;
        let num = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        let den = 1.0 + b.iter().map(|v| v * v).sum::<f64>().sqrt();
        num / den
    }

    #[test]
    fn enhancement_growth_matches_from_scratch_refit() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = BlsNet::init(10, 1, 8, 40, 0.8, LAMBDA, &mut rng).unwrap();
        let x = uniform_inputs(&mut rng, 300, 10);
        let y = smooth_targets(&x);
        let before = net.fit_output_weights(&x.view(), &y.view()).unwrap();
        let after = net.add_enhancement_nodes(25, &x.view(), &y.view(), &mut rng).unwrap();
        assert!(after.rmse <= before.rmse + 1e-9);
        let scratch = from_scratch_refit(&net, &x, &y);
        let grown = net.forward(&x.view()).unwrap();
        assert!(pred_rel_err(&grown, &scratch) < 1e-5);
    }

    #[test]
    fn feature_growth_matches_from_scratch_refit() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut net = BlsNet::init(10, 1, 8, 40, 0.8, LAMBDA, &mut rng).unwrap();
        let x = uniform_inputs(&mut rng, 320, 10);
        let y = smooth_targets(&x);
        let mut last = net.fit_output_weights(&x.view(), &y.view()).unwrap().rmse;
        // add_feature_nodes draws the spec'd companion block: 2 * 40/8 = 10.
        let report = net.add_feature_nodes(2, &x.view(), &y.view(), &mut rng).unwrap();
        assert_eq!((net.n_feature(), net.m_enhance()), (10, 50));
        assert!(report.rmse <= last + 1e-9);
        last = report.rmse;
        let report = net.add_enhancement_nodes(30, &x.view(), &y.view(), &mut rng).unwrap();
        assert!(report.rmse <= last + 1e-9);
        let scratch = from_scratch_refit(&net, &x, &y);
        let grown = net.forward(&x.view()).unwrap();
        assert!(pred_rel_err(&grown, &scratch) < 1e-5);
    }

    #[test]
    fn single_enhancement_growth_never_hurts_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut net = BlsNet::init(10, 1, 6, 20, 0.8, LAMBDA, &mut rng).unwrap();
        let x = uniform_inputs(&mut rng, 200, 10);
        let y = smooth_targets(&x);
        let before = net.fit_output_weights(&x.view(), &y.view()).unwrap();
        let after = net.add_enhancement_nodes(1, &x.view(), &y.view(), &mut rng).unwrap();
        assert!(after.rmse <= before.rmse + 1e-9);
    }

    #[test]
    fn growth_is_seed_deterministic() {
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = BlsNet::init(4, 1, 5, 10, 0.8, LAMBDA, &mut rng).unwrap();
            let x = Array2::from_shape_fn((50, 4), |_| rng.random_range(-1.0..1.0));
            let y = smooth_targets(&x);
            net.fit_output_weights(&x.view(), &y.view()).unwrap();
            net.add_feature_nodes(1, &x.view(), &y.view(), &mut rng).unwrap();
            net.add_enhancement_nodes(3, &x.view(), &y.view(), &mut rng).unwrap();
            net
        };
        let a = run(21);
        let b = run(21);
        assert_eq!(a.w_out, b.w_out);
        assert_eq!(a.w_e, b.w_e);
        assert_eq!(a.w_f, b.w_f);
    }

    #[test]
    fn frozen_weights_survive_fit_and_polyak() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut net = BlsNet::init(3, 1, 4, 9, 0.8, LAMBDA, &mut rng).unwrap();
        let frozen = (
            net.w_f.clone(),
            net.beta_f.clone(),
            net.w_e.clone(),
            net.beta_e.clone(),
        );
        let x = uniform_inputs(&mut rng, 30, 3);
        let y = smooth_targets(&x);
        net.fit_output_weights(&x.view(), &y.view()).unwrap();
        let mut target = net.clone_untrained_cache();
        target.polyak_output_weights(&net, 0.5).unwrap();
        assert_eq!(net.w_f, frozen.0);
        assert_eq!(net.beta_f, frozen.1);
        assert_eq!(net.w_e, frozen.2);
        assert_eq!(net.beta_e, frozen.3);
        assert_eq!(target.w_e, frozen.2);
    }

    #[test]
    fn polyak_endpoints_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut source = BlsNet::init(3, 1, 4, 5, 0.8, LAMBDA, &mut rng).unwrap();
        let x = uniform_inputs(&mut rng, 25, 3);
        let y = smooth_targets(&x);
        source.fit_output_weights(&x.view(), &y.view()).unwrap();

        let mut target = source.clone_untrained_cache();
        target.w_out.fill(0.0);
        let zero = target.w_out.clone();
        target.polyak_output_weights(&source, 1.0).unwrap();
        assert_eq!(target.w_out, zero);
        target.polyak_output_weights(&source, 0.0).unwrap();
        assert_eq!(target.w_out, source.w_out);
        target.w_out.fill(0.0);
        target.polyak_output_weights(&source, 0.5).unwrap();
        let halved = source.w_out.mapv(|v| 0.5 * v);
        let diff = &target.w_out - &halved;
        assert!(diff.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn polyak_rejects_mismatched_node_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut a = BlsNet::init(3, 1, 4, 5, 0.8, LAMBDA, &mut rng).unwrap();
        let b = BlsNet::init(3, 1, 4, 6, 0.8, LAMBDA, &mut rng).unwrap();
        assert!(matches!(
            a.polyak_output_weights(&b, 0.5),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn input_gradient_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let net = BlsNet::init(4, 2, 5, 6, 0.8, LAMBDA, &mut rng).unwrap();
        let x = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.4]);
        let j = net.input_gradient(&x.view()).unwrap();
        assert_eq!(j.dim(), (2, 4));
        assert!(j.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn input_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..10 {
            let mut net = BlsNet::init(4, 2, 5, 8, 0.8, LAMBDA, &mut rng).unwrap();
            let x = uniform_inputs(&mut rng, 30, 4);
            let y = uniform_inputs(&mut rng, 30, 2);
            net.fit_output_weights(&x.view(), &y.view()).unwrap();
            let point = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
            let j = net.input_gradient(&point.view()).unwrap();
            let h = 1e-5;
            for col in 0..4 {
                let mut plus = point.clone();
                plus[col] += h;
                let mut minus = point.clone();
                minus[col] -= h;
                let fp = net.forward(&plus.view().insert_axis(Axis(0))).unwrap();
                let fm = net.forward(&minus.view().insert_axis(Axis(0))).unwrap();
                for row in 0..2 {
                    let fd = (fp[[0, row]] - fm[[0, row]]) / (2.0 * h);
                    let err = (j[[row, col]] - fd).abs() / fd.abs().max(1.0);
                    assert!(err < 1e-4, "row {row} col {col}: {} vs {}", j[[row, col]], fd);
                }
            }
        }
    }

    #[test]
    fn input_gradient_rows_agree_with_single_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut net = BlsNet::init(5, 1, 6, 11, 0.8, LAMBDA, &mut rng).unwrap();
        let x = uniform_inputs(&mut rng, 40, 5);
        let y = smooth_targets(&x);
        net.fit_output_weights(&x.view(), &y.view()).unwrap();
        let rows = net.input_gradient_rows(&x.view()).unwrap();
        for i in [0usize, 7, 39] {
            let single = net.input_gradient(&x.row(i)).unwrap();
            for c in 0..5 {
                assert!((rows[[i, c]] - single[[0, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dead_enhancement_path_leaves_feature_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut net = BlsNet::init(3, 1, 4, 5, 0.8, LAMBDA, &mut rng).unwrap();
        net.w_e.fill(0.0);
        let x = uniform_inputs(&mut rng, 30, 3);
        let y = smooth_targets(&x);
        net.fit_output_weights(&x.view(), &y.view()).unwrap();
        let point = Array1::from_vec(vec![0.2, -0.1, 0.4]);
        let j = net.input_gradient(&point.view()).unwrap();
        // With W_e = 0 the enhancement block is constant, so only the direct
        // feature path can contribute.
        let xb = point.view().insert_axis(Axis(0));
        let z = net.feature_block(&xb).unwrap();
        let dz = z.mapv(|v| 1.0 - v * v);
        let w_z = net.w_out.slice(s![0..net.n_feature, ..]);
        let mut direct = w_z.t().to_owned();
        direct *= &dz;
        let direct = direct.dot(&net.w_f.t());
        let diff = &j - &direct;
        assert!(diff.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn sync_growth_preserves_target_rows_and_copies_new() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut source = BlsNet::init(4, 1, 5, 10, 0.8, LAMBDA, &mut rng).unwrap();
        let mut target = source.clone_untrained_cache();
        target.w_out.fill(7.0);
        let x = uniform_inputs(&mut rng, 60, 4);
        let y = smooth_targets(&x);
        source.fit_output_weights(&x.view(), &y.view()).unwrap();
        source.add_feature_nodes_with(1, 2, &x.view(), &y.view(), &mut rng).unwrap();
        target.sync_growth_from(&source, 5, 10).unwrap();
        assert_eq!((target.n_feature(), target.m_enhance()), (6, 12));
        assert_eq!(target.w_e, source.w_e);
        // Pre-existing rows keep the target's values.
        for i in 0..5 {
            assert_eq!(target.w_out[[i, 0]], 7.0);
        }
        for i in 6..6 + 10 {
            assert_eq!(target.w_out[[i, 0]], 7.0);
        }
        // New feature row and companion rows come from the source.
        assert_eq!(target.w_out[[5, 0]], source.w_out[[5, 0]]);
        assert_eq!(target.w_out[[16, 0]], source.w_out[[16, 0]]);
        assert_eq!(target.w_out[[17, 0]], source.w_out[[17, 0]]);
    }
}
