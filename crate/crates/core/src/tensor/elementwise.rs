//! Pointwise primitives. Binary ops require equal shapes; the only
//! broadcasting is scalar-times-tensor through [`Var::scale`].

use std::rc::Rc;

use super::{check_same_shape, Tensor, Var};
use crate::error::Result;

/// Default LeakyReLU negative slope.
pub const LEAKY_RELU_SLOPE: f32 = 0.2;

impl<'t> Var<'t> {
    fn unary(
        self,
        f: impl Fn(f32) -> f32,
        // derivative given (input, output)
        df: impl Fn(f32, f32) -> f32 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let y_keep = y.clone();
        self.tape().record(
            (*y).clone(),
            &[self],
            Box::new(move |g, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y_keep.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(Tensor::new(g.shape().to_vec(), data).unwrap())]
            }),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f32::tanh, |_, y| 1.0 - y * y)
    }

    pub fn leaky_relu(self, slope: f32) -> Var<'t> {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(f32::abs, |x, _| if x >= 0.0 { 1.0 } else { -1.0 })
    }

    /// Multiply by a constant scalar.
    pub fn scale(self, c: f32) -> Var<'t> {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f32) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// `1 - x`, used to invert soft masks.
    pub fn one_minus(self) -> Var<'t> {
        self.unary(|x| 1.0 - x, |_, _| -1.0)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("add", &a, &b)?;
        let y = a.zip_map(&b, |x, y| x + y);
        Ok(self.tape().record(
            y,
            &[self, other],
            Box::new(|g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]),
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("sub", &a, &b)?;
        let y = a.zip_map(&b, |x, y| x - y);
        Ok(self.tape().record(
            y,
            &[self, other],
            Box::new(|g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]),
        ))
    }

    /// Hadamard product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("mul", &a, &b)?;
        let y = a.zip_map(&b, |x, y| x * y);
        Ok(self.tape().record(
            y,
            &[self, other],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&b, |g, b| g * b)),
                    needs[1].then(|| g.zip_map(&a, |g, a| g * a)),
                ]
            }),
        ))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("div", &a, &b)?;
        let y = a.zip_map(&b, |x, y| x / y);
        Ok(self.tape().record(
            y,
            &[self, other],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&b, |g, b| g / b)),
                    needs[1].then(|| {
                        let t = g.zip_map(&a, |g, a| g * a);
                        t.zip_map(&b, |ga, b| -ga / (b * b))
                    }),
                ]
            }),
        ))
    }
}
