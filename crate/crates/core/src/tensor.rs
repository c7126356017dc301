//! Dense NHWC tensors used by the network engine and the batch pipeline.

/// A 4-D tensor in batch, height, width, channel order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn channels(&self) -> usize {
        self.shape[3]
    }

    /// (height, width, channels) of one sample.
    pub fn sample_shape(&self) -> (usize, usize, usize) {
        (self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// Same data viewed with a different shape of equal volume.
    pub fn reshape(self, shape: [usize; 4]) -> Self {
        Self::new(shape, self.data)
    }

    /// Concatenates samples of identical shape along the batch axis.
    pub fn stack(samples: &[Tensor]) -> Self {
        assert!(!samples.is_empty(), "cannot stack zero tensors");
        let [_, h, w, c] = samples[0].shape;
        let mut data = Vec::with_capacity(samples.len() * h * w * c);
        let mut n = 0;
        for s in samples {
            assert_eq!(
                (s.shape[1], s.shape[2], s.shape[3]),
                (h, w, c),
                "stacked tensors must share a sample shape"
            );
            data.extend_from_slice(&s.data);
            n += s.shape[0];
        }
        Self::new([n, h, w, c], data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
