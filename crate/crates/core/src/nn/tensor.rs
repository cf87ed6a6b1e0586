use crate::scalar::Scalar;

/// Dense `channels × height × width` map, row-major within each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width, "feature map size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.channels, other.height, other.width)
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        let i = self.index(c, y, x);
        &mut self.data[i]
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.dims(), other.dims());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Stacks maps with equal spatial size along the channel axis.
    pub fn concat_channels(maps: &[&Self]) -> Self {
        let (h, w) = (maps[0].height, maps[0].width);
        let mut data = Vec::with_capacity(maps.iter().map(|m| m.data.len()).sum());
        let mut channels = 0;
        for m in maps {
            assert_eq!((m.height, m.width), (h, w), "concat spatial mismatch");
            data.extend_from_slice(&m.data);
            channels += m.channels;
        }
        Self::from_vec(channels, h, w, data)
    }

    /// Inverse of [`concat_channels`](Self::concat_channels).
    pub fn split_channels(&self, sizes: &[usize]) -> Vec<Self> {
        assert_eq!(sizes.iter().sum::<usize>(), self.channels);
        let p = self.plane();
        let mut start = 0;
        sizes
            .iter()
            .map(|&c| {
                let m = Self::from_vec(
                    c,
                    self.height,
                    self.width,
                    self.data[start * p..(start + c) * p].to_vec(),
                );
                start += c;
                m
            })
            .collect()
    }
}
