use super::{NumError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters with index-aligned gradient accumulators.
///
/// `version` changes whenever parameter values are mutated so a recorded
/// graph can detect that its forward values went stale.
#[derive(Debug, Clone, Default)]
pub struct ParamTape {
    names: Vec<String>,
    params: Vec<Tensor>,
    grads: Vec<Tensor>,
    version: u64,
}

impl ParamTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, NumError> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(NumError::DuplicateParam(name));
        }
        self.grads.push(Tensor::zeros(value.shape()));
        self.params.push(value);
        self.names.push(name);
        self.version += 1;
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.version += 1;
        &mut self.params[id.0]
    }

    /// Replaces a parameter value; the new value must keep the old shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<(), NumError> {
        if value.shape() != self.params[id.0].shape() {
            return Err(NumError::Shape {
                op: "ParamTape::set",
                left: self.params[id.0].shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *self.param_mut(id) = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    /// Parameter value and its gradient buffer, borrowed together.
    pub(crate) fn param_and_grad_mut(&mut self, id: ParamId) -> (&Tensor, &mut Tensor) {
        (&self.params[id.0], &mut self.grads[id.0])
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub(crate) fn params_and_grads_mut(&mut self) -> (&mut [Tensor], &[Tensor], &[String]) {
        self.version += 1;
        (&mut self.params, &self.grads, &self.names)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grads_align_with_params() {
        let mut tape = ParamTape::new();
        let a = tape.push("a", Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.push("b", Tensor::zeros(&[4])).unwrap();
        assert_eq!(tape.grad(a).shape(), &[2, 3]);
        assert_eq!(tape.grad(b).shape(), &[4]);
        assert_eq!(tape.id("b"), Some(b));
        assert!(matches!(
            tape.push("a", Tensor::zeros(&[1])),
            Err(NumError::DuplicateParam(_))
        ));
    }

    #[test]
    fn zero_grads_clears() {
        let mut tape = ParamTape::new();
        let a = tape.push("a", Tensor::zeros(&[3])).unwrap();
        tape.grad_mut(a).data_mut().fill(2.0);
        tape.zero_grads();
        assert!(tape.grad(a).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn version_tracks_mutation() {
        let mut tape = ParamTape::new();
        let a = tape.push("a", Tensor::zeros(&[3])).unwrap();
        let v = tape.version();
        let _ = tape.param(a);
        assert_eq!(tape.version(), v);
        tape.param_mut(a).data_mut()[0] = 1.0;
        assert!(tape.version() > v);
    }
}
