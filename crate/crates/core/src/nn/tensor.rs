/// Channel-major feature map: `data[((c * z + k) * y + j) * x + i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Tensor {
            channels,
            dims,
            data: vec![0.0; channels * dims.iter().product::<usize>()],
        }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * dims.iter().product::<usize>());
        Tensor { channels, dims, data }
    }

    /// Voxels per channel.
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Stacks `a` and `b` along channels.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.dims, b.dims);
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor::from_vec(a.channels + b.channels, a.dims, data)
    }

    /// Splits after `first` channels.
    pub fn split(self, first: usize) -> (Tensor, Tensor) {
        let n = self.voxels();
        let mut data = self.data;
        let rest = data.split_off(first * n);
        (
            Tensor::from_vec(first, self.dims, data),
            Tensor::from_vec(self.channels - first, self.dims, rest),
        )
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}
