use super::norm::NormTrace;
use super::pool::{
    avg_pool_backward, avg_pool_forward, global_avg_pool_backward, global_avg_pool_forward,
};
use super::{join, Conv2d, Linear, MaxPool, Module, Norm, Param};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Norm(Norm),
    Relu,
    AvgPool(usize),
    MaxPool(MaxPool),
    GlobalAvgPool,
    Linear(Linear),
    Bottleneck(Box<Bottleneck>),
}

/// Saved activations from a training-mode forward pass.
#[derive(Debug, Clone)]
pub enum Trace {
    Conv(Tensor),
    Norm(NormTrace),
    Relu(Tensor),
    AvgPool(Vec<usize>),
    MaxPool(Vec<usize>, Vec<usize>),
    GlobalAvgPool(Vec<usize>),
    Linear(Tensor),
    Bottleneck(Box<BottleneckTrace>),
}

fn relu(mut x: Tensor) -> Tensor {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

fn relu_backward(out: &Tensor, mut dy: Tensor) -> Tensor {
    for (g, &y) in dy.data_mut().iter_mut().zip(out.data()) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
    dy
}

impl Layer {
    pub fn forward_train(&mut self, x: Tensor, update_running: bool) -> Result<(Tensor, Trace)> {
        Ok(match self {
            Layer::Conv(c) => {
                let y = c.forward(&x)?;
                (y, Trace::Conv(x))
            }
            Layer::Norm(nm) => {
                let (y, t) = nm.forward_train(&x, update_running)?;
                (y, Trace::Norm(t))
            }
            Layer::Relu => {
                let y = relu(x);
                (y.clone(), Trace::Relu(y))
            }
            Layer::AvgPool(k) => (avg_pool_forward(&x, *k)?, Trace::AvgPool(x.shape().to_vec())),
            Layer::MaxPool(mp) => {
                let (y, arg) = mp.forward(&x)?;
                (y, Trace::MaxPool(x.shape().to_vec(), arg))
            }
            Layer::GlobalAvgPool => (
                global_avg_pool_forward(&x)?,
                Trace::GlobalAvgPool(x.shape().to_vec()),
            ),
            Layer::Linear(l) => {
                let y = l.forward(&x)?;
                (y, Trace::Linear(x))
            }
            Layer::Bottleneck(b) => {
                let (y, t) = b.forward_train(x, update_running)?;
                (y, Trace::Bottleneck(Box::new(t)))
            }
        })
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::Norm(nm) => nm.forward_eval(x),
            Layer::Relu => Ok(relu(x.clone())),
            Layer::AvgPool(k) => avg_pool_forward(x, *k),
            Layer::MaxPool(mp) => Ok(mp.forward(x)?.0),
            Layer::GlobalAvgPool => global_avg_pool_forward(x),
            Layer::Linear(l) => l.forward(x),
            Layer::Bottleneck(b) => b.forward_eval(x),
        }
    }

    /// Accumulate parameter gradients; return the input gradient when
    /// `need_dx` is set.
    pub fn backward(&mut self, trace: &Trace, dy: Tensor, need_dx: bool) -> Option<Tensor> {
        match (self, trace) {
            (Layer::Conv(c), Trace::Conv(x)) => c.backward(x, &dy, need_dx),
            (Layer::Norm(nm), Trace::Norm(t)) => nm.backward(t, &dy, need_dx),
            (Layer::Relu, Trace::Relu(y)) => need_dx.then(|| relu_backward(y, dy)),
            (Layer::AvgPool(k), Trace::AvgPool(s)) => need_dx.then(|| avg_pool_backward(s, &dy, *k)),
            (Layer::MaxPool(_), Trace::MaxPool(s, arg)) => {
                need_dx.then(|| MaxPool::backward(s, arg, &dy))
            }
            (Layer::GlobalAvgPool, Trace::GlobalAvgPool(s)) => {
                need_dx.then(|| global_avg_pool_backward(s, &dy))
            }
            (Layer::Linear(l), Trace::Linear(x)) => l.backward(x, &dy, need_dx),
            (Layer::Bottleneck(b), Trace::Bottleneck(t)) => b.backward(t, dy, need_dx),
            _ => panic!("trace does not belong to this layer"),
        }
    }

    fn has_params(&self) -> bool {
        matches!(
            self,
            Layer::Conv(_) | Layer::Norm(_) | Layer::Linear(_) | Layer::Bottleneck(_)
        )
    }
}

impl Module for Layer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        match self {
            Layer::Conv(c) => c.visit_params(prefix, f),
            Layer::Norm(n) => n.visit_params(prefix, f),
            Layer::Linear(l) => l.visit_params(prefix, f),
            Layer::Bottleneck(b) => b.visit_params(prefix, f),
            _ => {}
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            Layer::Conv(c) => c.visit_params_mut(prefix, f),
            Layer::Norm(n) => n.visit_params_mut(prefix, f),
            Layer::Linear(l) => l.visit_params_mut(prefix, f),
            Layer::Bottleneck(b) => b.visit_params_mut(prefix, f),
            _ => {}
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        match self {
            Layer::Norm(n) => n.visit_buffers(prefix, f),
            Layer::Bottleneck(b) => b.visit_buffers(prefix, f),
            _ => {}
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        match self {
            Layer::Norm(n) => n.visit_buffers_mut(prefix, f),
            Layer::Bottleneck(b) => b.visit_buffers_mut(prefix, f),
            _ => {}
        }
    }
}

/// Ordered, named chain of layers. Names become parameter-path segments.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    layers: Vec<(String, Layer)>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, layer: Layer) -> &mut Self {
        self.layers.push((name.into(), layer));
        self
    }

    pub fn with(mut self, name: impl Into<String>, layer: Layer) -> Self {
        self.push(name, layer);
        self
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, &Layer)> {
        self.layers.iter().map(|(n, l)| (n.as_str(), l))
    }

    pub fn forward_train(&mut self, mut x: Tensor, update_running: bool) -> Result<(Tensor, Vec<Trace>)> {
        let mut traces = Vec::with_capacity(self.layers.len());
        for (_, layer) in &mut self.layers {
            let (y, t) = layer.forward_train(x, update_running)?;
            traces.push(t);
            x = y;
        }
        Ok((x, traces))
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut iter = self.layers.iter();
        let Some((_, first)) = iter.next() else {
            return Ok(x.clone());
        };
        let mut y = first.forward_eval(x)?;
        for (_, layer) in iter {
            y = layer.forward_eval(&y)?;
        }
        Ok(y)
    }

    /// Backpropagate through the chain. Input gradients are only formed
    /// where a later (closer to the input) layer still needs them.
    pub fn backward(&mut self, traces: &[Trace], mut dy: Tensor, need_dx: bool) -> Option<Tensor> {
        assert_eq!(traces.len(), self.layers.len(), "trace count mismatch");
        let first_param = self.layers.iter().position(|(_, l)| l.has_params());
        for (idx, ((_, layer), trace)) in self.layers.iter_mut().zip(traces).enumerate().rev() {
            let want_dx = need_dx || first_param.is_some_and(|p| idx > p);
            match layer.backward(trace, dy, want_dx) {
                Some(d) => dy = d,
                None => return None,
            }
        }
        Some(dy)
    }
}

impl Module for Sequential {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (name, l) in &self.layers {
            l.visit_params(&join(prefix, name), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (name, l) in &mut self.layers {
            l.visit_params_mut(&join(prefix, name), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        for (name, l) in &self.layers {
            l.visit_buffers(&join(prefix, name), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        for (name, l) in &mut self.layers {
            l.visit_buffers_mut(&join(prefix, name), f);
        }
    }
}

/// Residual bottleneck: `relu(main(x) + shortcut(x))`.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub main: Sequential,
    pub downsample: Option<Sequential>,
}

#[derive(Debug, Clone)]
pub struct BottleneckTrace {
    main: Vec<Trace>,
    downsample: Option<Vec<Trace>>,
    out: Tensor,
}

impl Bottleneck {
    fn forward_train(&mut self, x: Tensor, update_running: bool) -> Result<(Tensor, BottleneckTrace)> {
        let (shortcut, ds_trace) = match self.downsample.as_mut() {
            Some(ds) => {
                let (s, t) = ds.forward_train(x.clone(), update_running)?;
                (s, Some(t))
            }
            None => (x.clone(), None),
        };
        let (mut y, main_trace) = self.main.forward_train(x, update_running)?;
        y.add_scaled(&shortcut, 1.0);
        let y = relu(y);
        Ok((
            y.clone(),
            BottleneckTrace {
                main: main_trace,
                downsample: ds_trace,
                out: y,
            },
        ))
    }

    fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let shortcut = match &self.downsample {
            Some(ds) => ds.forward_eval(x)?,
            None => x.clone(),
        };
        let mut y = self.main.forward_eval(x)?;
        y.add_scaled(&shortcut, 1.0);
        Ok(relu(y))
    }

    fn backward(&mut self, t: &BottleneckTrace, dy: Tensor, need_dx: bool) -> Option<Tensor> {
        let dsum = relu_backward(&t.out, dy);
        let main_dx = self.main.backward(&t.main, dsum.clone(), need_dx);
        let short_dx = match (self.downsample.as_mut(), &t.downsample) {
            (Some(ds), Some(dt)) => ds.backward(dt, dsum, need_dx),
            _ => need_dx.then_some(dsum),
        };
        match (main_dx, short_dx) {
            (Some(mut a), Some(b)) => {
                a.add_scaled(&b, 1.0);
                Some(a)
            }
            _ => None,
        }
    }
}

impl Module for Bottleneck {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.main.visit_params(prefix, f);
        if let Some(ds) = &self.downsample {
            ds.visit_params(&join(prefix, "downsample"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.main.visit_params_mut(prefix, f);
        if let Some(ds) = &mut self.downsample {
            ds.visit_params_mut(&join(prefix, "downsample"), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.main.visit_buffers(prefix, f);
        if let Some(ds) = &self.downsample {
            ds.visit_buffers(&join(prefix, "downsample"), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.main.visit_buffers_mut(prefix, f);
        if let Some(ds) = &mut self.downsample {
            ds.visit_buffers_mut(&join(prefix, "downsample"), f);
        }
    }
}
