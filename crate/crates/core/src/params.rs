//! Named views over trainable tensors.
//!
//! Every parameter struct (and its gradient, which has the same type) exposes
//! its tensors in a fixed order with stable dotted names. The optimizer,
//! checkpoint writer and gradient checker all walk this list.

/// What a tensor is used for; decides weight decay and gradcheck coverage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Matrix,
    Bias,
    NormScale,
    NormShift,
    Token,
}

impl Role {
    pub fn decays(self) -> bool {
        matches!(self, Role::Matrix)
    }
}

#[derive(Debug)]
pub struct TensorRef<'a> {
    pub name: String,
    pub role: Role,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

#[derive(Debug)]
pub struct TensorMut<'a> {
    pub name: String,
    pub role: Role,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

pub trait Parameters {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>);

    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }

    /// `self += other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            debug_assert_eq!(dst.name, src.name);
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += s;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Pushes an ndarray tensor (standard layout) onto a ref list.
macro_rules! push_ref {
    ($out:expr, $prefix:expr, $name:expr, $role:expr, $arr:expr) => {
        $out.push($crate::params::TensorRef {
            name: $crate::params::join($prefix, $name),
            role: $role,
            shape: $arr.shape().to_vec(),
            data: $arr.as_slice().expect("parameters are kept in standard layout"),
        })
    };
}

macro_rules! push_mut {
    ($out:expr, $prefix:expr, $name:expr, $role:expr, $arr:expr) => {
        $out.push($crate::params::TensorMut {
            name: $crate::params::join($prefix, $name),
            role: $role,
            shape: $arr.shape().to_vec(),
            data: $arr.as_slice_mut().expect("parameters are kept in standard layout"),
        })
    };
}

pub(crate) use push_mut;
pub(crate) use push_ref;
