//! Parameterized layers and the residual encoder/decoder blocks.

use super::ops::{self, BatchNormCache, ConvGeom};
use super::params::{Gradients, ParamKind, ParamStore};
use super::tensor::Tensor;

/// Running-statistic momentum of batch normalization.
pub const BN_MOMENTUM: f32 = 0.1;

/// Per-forward state: whether batch statistics are used, and the running
/// statistic updates collected on the way (applied after the step).
#[derive(Debug, Default)]
pub struct ForwardCtx {
    pub train: bool,
    pub stat_updates: Vec<StatUpdate>,
}

#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub layer: String,
    pub mean: Vec<f32>,
    /// Unbiased batch variance.
    pub var: Vec<f32>,
}

impl ForwardCtx {
    pub fn train() -> Self {
        ForwardCtx {
            train: true,
            stat_updates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        ForwardCtx::default()
    }
}

/// Blend collected batch statistics into the running buffers.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate]) {
    for u in updates {
        let m = BN_MOMENTUM;
        for (r, &b) in store
            .get_mut(&format!("{}.running_mean", u.layer))
            .iter_mut()
            .zip(&u.mean)
        {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in store
            .get_mut(&format!("{}.running_var", u.layer))
            .iter_mut()
            .zip(&u.var)
        {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeom,
    pub bias: bool,
}

impl Conv {
    pub fn new(name: String, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Self {
        Conv {
            name,
            cin,
            cout,
            geom: ConvGeom { k, stride },
            bias,
        }
    }

    fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn register(&self, store: &mut ParamStore) {
        let k = self.geom.k;
        store.add(self.weight(), &[self.cout, self.cin, k, k], ParamKind::ConvKernel);
        if self.bias {
            store.add(self.bias_name(), &[self.cout], ParamKind::Bias);
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "{}: input channels", self.name);
        let b = self.bias.then(|| p.get(&self.bias_name()));
        ops::conv2d_forward(x, p.get(&self.weight()), b, self.cout, self.geom)
    }

    pub fn backward(&self, p: &ParamStore, x: &Tensor, dy: &Tensor, g: &mut Gradients) -> Tensor {
        let w = self.weight();
        let mut dw = g.slot(&w).to_vec();
        let mut db = self.bias.then(|| g.slot(&self.bias_name()).to_vec());
        let dx = ops::conv2d_backward(x, p.get(&w), dy, self.geom, &mut dw, db.as_deref_mut());
        g.slot(&w).copy_from_slice(&dw);
        if let Some(db) = db {
            g.slot(&self.bias_name()).copy_from_slice(&db);
        }
        dx
    }
}

#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub name: String,
    pub c: usize,
    pub geom: ConvGeom,
}

impl DepthwiseConv {
    fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn register(&self, store: &mut ParamStore) {
        let k = self.geom.k;
        store.add(self.weight(), &[self.c, 1, k, k], ParamKind::ConvKernel);
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor) -> Tensor {
        ops::depthwise_forward(x, p.get(&self.weight()), self.geom)
    }

    pub fn backward(&self, p: &ParamStore, x: &Tensor, dy: &Tensor, g: &mut Gradients) -> Tensor {
        let w = self.weight();
        let mut dw = g.slot(&w).to_vec();
        let dx = ops::depthwise_backward(x, p.get(&w), dy, self.geom, &mut dw);
        g.slot(&w).copy_from_slice(&dw);
        dx
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub c: usize,
}

impl BatchNorm {
    fn key(&self, field: &str) -> String {
        format!("{}.{field}", self.name)
    }

    pub fn register(&self, store: &mut ParamStore) {
        store.add(self.key("gamma"), &[self.c], ParamKind::BnGamma);
        store.add(self.key("beta"), &[self.c], ParamKind::BnBeta);
        store.add(self.key("running_mean"), &[self.c], ParamKind::BnRunningMean);
        store.add(self.key("running_var"), &[self.c], ParamKind::BnRunningVar);
    }

    pub fn forward(
        &self,
        p: &ParamStore,
        x: &Tensor,
        ctx: &mut ForwardCtx,
    ) -> (Tensor, Option<BatchNormCache>) {
        let gamma = p.get(&self.key("gamma"));
        let beta = p.get(&self.key("beta"));
        if ctx.train {
            let (y, cache, mean, var) = ops::batch_norm_train(x, gamma, beta);
            let m = (x.n * x.plane_len()) as f32;
            let unbiased = if m > 1.0 {
                var.iter().map(|v| v * m / (m - 1.0)).collect()
            } else {
                var
            };
            ctx.stat_updates.push(StatUpdate {
                layer: self.name.clone(),
                mean,
                var: unbiased,
            });
            (y, Some(cache))
        } else {
            let y = ops::batch_norm_eval(
                x,
                gamma,
                beta,
                p.get(&self.key("running_mean")),
                p.get(&self.key("running_var")),
            );
            (y, None)
        }
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        cache: &Option<BatchNormCache>,
        dy: &Tensor,
        g: &mut Gradients,
    ) -> Tensor {
        let cache = cache
            .as_ref()
            .expect("backward through batch norm requires a training forward");
        let mut dgamma = g.slot(&self.key("gamma")).to_vec();
        let mut dbeta = g.slot(&self.key("beta")).to_vec();
        let dx = ops::batch_norm_backward(cache, p.get(&self.key("gamma")), dy, &mut dgamma, &mut dbeta);
        g.slot(&self.key("gamma")).copy_from_slice(&dgamma);
        g.slot(&self.key("beta")).copy_from_slice(&dbeta);
        dx
    }
}

/// Residual downsampling block: a strided convolution path summed with a
/// convolution, depthwise-separable convolution and max-pool path.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    conv_a: Conv,
    bn_a: BatchNorm,
    conv_b: Conv,
    bn_b: BatchNorm,
    dw: DepthwiseConv,
    pw: Conv,
    bn_c: BatchNorm,
}

pub struct EncoderCache {
    x: Tensor,
    bn_a: Option<BatchNormCache>,
    b_pre: Tensor,
    bn_b: Option<BatchNormCache>,
    b1: Tensor,
    b2: Tensor,
    bn_c: Option<BatchNormCache>,
    b4: Tensor,
    pool_arg: Vec<u8>,
    out: Tensor,
}

impl EncoderBlock {
    pub fn new(name: &str, cin: usize, cout: usize) -> Self {
        EncoderBlock {
            conv_a: Conv::new(format!("{name}.short.conv"), cin, cout, 3, 2, false),
            bn_a: BatchNorm { name: format!("{name}.short.bn"), c: cout },
            conv_b: Conv::new(format!("{name}.main.conv"), cin, cout, 3, 1, false),
            bn_b: BatchNorm { name: format!("{name}.main.bn1"), c: cout },
            dw: DepthwiseConv {
                name: format!("{name}.main.dw"),
                c: cout,
                geom: ConvGeom { k: 3, stride: 1 },
            },
            pw: Conv::new(format!("{name}.main.pw"), cout, cout, 1, 1, false),
            bn_c: BatchNorm { name: format!("{name}.main.bn2"), c: cout },
        }
    }

    pub fn register(&self, s: &mut ParamStore) {
        self.conv_a.register(s);
        self.bn_a.register(s);
        self.conv_b.register(s);
        self.bn_b.register(s);
        self.dw.register(s);
        self.pw.register(s);
        self.bn_c.register(s);
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor, ctx: &mut ForwardCtx) -> (Tensor, EncoderCache) {
        let a_pre = self.conv_a.forward(p, x);
        let (a, bn_a) = self.bn_a.forward(p, &a_pre, ctx);
        let b_pre = self.conv_b.forward(p, x);
        let (b, bn_b) = self.bn_b.forward(p, &b_pre, ctx);
        let b1 = ops::relu(&b);
        let b2 = self.dw.forward(p, &b1);
        let b3 = self.pw.forward(p, &b2);
        let (b3n, bn_c) = self.bn_c.forward(p, &b3, ctx);
        let b4 = ops::relu(&b3n);
        let (b5, pool_arg) = ops::max_pool2(&b4);
        let out = ops::relu(&a.add(&b5));
        let cache = EncoderCache {
            x: x.clone(),
            bn_a,
            b_pre,
            bn_b,
            b1,
            b2,
            bn_c,
            b4,
            pool_arg,
            out: out.clone(),
        };
        (out, cache)
    }

    pub fn backward(&self, p: &ParamStore, c: &EncoderCache, dout: &Tensor, g: &mut Gradients) -> Tensor {
        let dsum = ops::relu_backward(&c.out, dout);
        let da_pre = self.bn_a.backward(p, &c.bn_a, &dsum, g);
        let mut dx = self.conv_a.backward(p, &c.x, &da_pre, g);
        let db4 = ops::max_pool2_backward(&dsum, &c.pool_arg, c.b4.h, c.b4.w);
        let db3n = ops::relu_backward(&c.b4, &db4);
        let db3 = self.bn_c.backward(p, &c.bn_c, &db3n, g);
        let db2 = self.pw.backward(p, &c.b2, &db3, g);
        let db1 = self.dw.backward(p, &c.b1, &db2, g);
        let db = ops::relu_backward(&c.b1, &db1);
        let db_pre = self.bn_b.backward(p, &c.bn_b, &db, g);
        debug_assert_eq!(db_pre.shape(), c.b_pre.shape());
        dx.add_assign(&self.conv_b.backward(p, &c.x, &db_pre, g));
        dx
    }
}

/// Residual upsampling block: an upsample-then-convolve path summed with a
/// convolution, depthwise-separable convolution and upsample path.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    conv_a: Conv,
    bn_a: BatchNorm,
    conv_b: Conv,
    bn_b: BatchNorm,
    dw: DepthwiseConv,
    pw: Conv,
    bn_c: BatchNorm,
}

pub struct DecoderCache {
    x: Tensor,
    u: Tensor,
    bn_a: Option<BatchNormCache>,
    bn_b: Option<BatchNormCache>,
    t1: Tensor,
    t2: Tensor,
    bn_c: Option<BatchNormCache>,
    t4: Tensor,
    out: Tensor,
}

impl DecoderBlock {
    pub fn new(name: &str, cin: usize, cout: usize) -> Self {
        DecoderBlock {
            conv_a: Conv::new(format!("{name}.short.conv"), cin, cout, 3, 1, false),
            bn_a: BatchNorm { name: format!("{name}.short.bn"), c: cout },
            conv_b: Conv::new(format!("{name}.main.conv"), cin, cout, 3, 1, false),
            bn_b: BatchNorm { name: format!("{name}.main.bn1"), c: cout },
            dw: DepthwiseConv {
                name: format!("{name}.main.dw"),
                c: cout,
                geom: ConvGeom { k: 3, stride: 1 },
            },
            pw: Conv::new(format!("{name}.main.pw"), cout, cout, 1, 1, false),
            bn_c: BatchNorm { name: format!("{name}.main.bn2"), c: cout },
        }
    }

    pub fn register(&self, s: &mut ParamStore) {
        self.conv_a.register(s);
        self.bn_a.register(s);
        self.conv_b.register(s);
        self.bn_b.register(s);
        self.dw.register(s);
        self.pw.register(s);
        self.bn_c.register(s);
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor, ctx: &mut ForwardCtx) -> (Tensor, DecoderCache) {
        let u = ops::upsample2(x);
        let s1_pre = self.conv_a.forward(p, &u);
        let (s1, bn_a) = self.bn_a.forward(p, &s1_pre, ctx);
        let t_pre = self.conv_b.forward(p, x);
        let (t, bn_b) = self.bn_b.forward(p, &t_pre, ctx);
        let t1 = ops::relu(&t);
        let t2 = self.dw.forward(p, &t1);
        let t3 = self.pw.forward(p, &t2);
        let (t3n, bn_c) = self.bn_c.forward(p, &t3, ctx);
        let t4 = ops::relu(&t3n);
        let s2 = ops::upsample2(&t4);
        let out = ops::relu(&s1.add(&s2));
        let cache = DecoderCache {
            x: x.clone(),
            u,
            bn_a,
            bn_b,
            t1,
            t2,
            bn_c,
            t4,
            out: out.clone(),
        };
        (out, cache)
    }

    pub fn backward(&self, p: &ParamStore, c: &DecoderCache, dout: &Tensor, g: &mut Gradients) -> Tensor {
        let dsum = ops::relu_backward(&c.out, dout);
        let ds1_pre = self.bn_a.backward(p, &c.bn_a, &dsum, g);
        let du = self.conv_a.backward(p, &c.u, &ds1_pre, g);
        let mut dx = ops::upsample2_backward(&du);
        let dt4 = ops::upsample2_backward(&dsum);
        let dt3n = ops::relu_backward(&c.t4, &dt4);
        let dt3 = self.bn_c.backward(p, &c.bn_c, &dt3n, g);
        let dt2 = self.pw.backward(p, &c.t2, &dt3, g);
        let dt1 = self.dw.backward(p, &c.t1, &dt2, g);
        let dt = ops::relu_backward(&c.t1, &dt1);
        let dt_pre = self.bn_b.backward(p, &c.bn_b, &dt, g);
        dx.add_assign(&self.conv_b.backward(p, &c.x, &dt_pre, g));
        dx
    }
}
