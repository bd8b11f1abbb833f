use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    HardSigmoid,
    HardSwish,
}

impl Activation {
    #[inline]
    pub fn apply<T: Element>(self, t: T) -> T {
        match self {
            Activation::Relu => t.max(T::zero()),
            Activation::Sigmoid => sigmoid(t),
            Activation::HardSigmoid => hard_sigmoid(t),
            Activation::HardSwish => t * hard_sigmoid(t),
        }
    }

    /// Derivative at input `t`, given the forward output `y`.
    #[inline]
    pub fn derivative<T: Element>(self, t: T, y: T) -> T {
        let three = T::of(3.0);
        match self {
            Activation::Relu => {
                if t > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::HardSigmoid => {
                if t > -three && t < three {
                    T::one() / T::of(6.0)
                } else {
                    T::zero()
                }
            }
            Activation::HardSwish => {
                if t <= -three {
                    T::zero()
                } else if t >= three {
                    T::one()
                } else {
                    (t + t + three) / T::of(6.0)
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::HardSigmoid => "hard_sigmoid",
            Activation::HardSwish => "hard_swish",
        }
    }
}

#[inline]
pub fn sigmoid<T: Element>(t: T) -> T {
    if t >= T::zero() {
        T::one() / (T::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn hard_sigmoid<T: Element>(t: T) -> T {
    ((t + T::of(3.0)) / T::of(6.0)).max(T::zero()).min(T::one())
}

pub fn activation_forward<T: Element>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

pub fn activation_backward<T: Element>(x: &Tensor<T>, y: &Tensor<T>, dy: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let mut dx = Tensor::zeros(x.shape());
    for (((d, &t), &yv), &g) in dx.data_mut().iter_mut().zip(x.data()).zip(y.data()).zip(dy.data()) {
        *d = g * kind.derivative(t, yv);
    }
    dx
}
