use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use super::{Result, Tensor, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// A trainable tensor with identity. Clones are aliases of the same weights.
#[derive(Clone)]
pub struct Parameter {
    inner: Arc<Inner>,
}

struct Inner {
    id: u64,
    name: String,
    value: RwLock<Tensor>,
    grad: Mutex<Option<Tensor>>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Parameter {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                name: name.into(),
                value: RwLock::new(value),
                grad: Mutex::new(None),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    /// Same underlying weights.
    pub fn same_as(&self, other: &Parameter) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn value(&self) -> RwLockReadGuard<'_, Tensor> {
        self.inner.value.read().expect("parameter lock poisoned")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().len()
    }

    pub fn set_value(&self, value: Tensor) -> Result<()> {
        let mut slot = self.inner.value.write().expect("parameter lock poisoned");
        if slot.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_value",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn update(&self, f: impl FnOnce(&mut [f64])) {
        let mut slot = self.inner.value.write().expect("parameter lock poisoned");
        f(slot.data_mut());
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.inner.grad.lock().expect("gradient lock poisoned").clone()
    }

    pub fn has_grad(&self) -> bool {
        self.inner.grad.lock().expect("gradient lock poisoned").is_some()
    }

    pub fn take_grad(&self) -> Option<Tensor> {
        self.inner.grad.lock().expect("gradient lock poisoned").take()
    }

    pub fn zero_grad(&self) {
        self.take_grad();
    }

    pub(crate) fn store_grad(&self, grad: Tensor) -> Result<()> {
        let mut slot = self.inner.grad.lock().expect("gradient lock poisoned");
        if slot.is_some() {
            return Err(TensorError::StaleGradients(format!(
                "{} still holds a gradient from a previous backward pass",
                self.name()
            )));
        }
        *slot = Some(grad);
        Ok(())
    }
}

impl fmt::Debug for Parameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Parameter")
            .field("id", &self.id())
            .field("name", &self.name())
            .field("shape", &self.shape())
            .finish()
    }
}
