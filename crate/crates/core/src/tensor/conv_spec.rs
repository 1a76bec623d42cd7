use crate::error::{Error, Result};

/// Geometry of a 2-D convolution.
///
/// Padding is not stored: every convolution uses `(K - 1) / 2` per axis, which
/// gives "same" output at stride 1 and exact halving at stride 2, and keeps
/// smaller kernels centred inside larger ones when branches are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            groups: 1,
            has_bias: false,
        }
    }

    /// Depthwise `k×k` over `channels`.
    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        Self::new(channels, channels, kernel).with_groups(channels)
    }

    pub fn with_kernel(mut self, kernel_h: usize, kernel_w: usize) -> Self {
        self.kernel_h = kernel_h;
        self.kernel_w = kernel_w;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn padding(&self) -> (usize, usize) {
        ((self.kernel_h - 1) / 2, (self.kernel_w - 1) / 2)
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// `(out, in / groups, K_h, K_w)`.
    pub fn weight_dims(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_per_group(),
            self.kernel_h,
            self.kernel_w,
        ]
    }

    pub fn weight_count(&self) -> usize {
        self.weight_dims().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::ConvSpec(msg));
        if self.in_channels == 0 || self.out_channels == 0 {
            return fail(format!(
                "channels must be positive ({} -> {})",
                self.in_channels, self.out_channels
            ));
        }
        if self.kernel_h % 2 == 0 || self.kernel_w % 2 == 0 {
            return fail(format!(
                "kernel {}x{} must be odd on both axes",
                self.kernel_h, self.kernel_w
            ));
        }
        if self.stride == 0 {
            return fail("stride must be at least 1".into());
        }
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return fail(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            ));
        }
        Ok(())
    }

    /// Output spatial size for an `h×w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = self.padding();
        if h + 2 * ph < self.kernel_h || w + 2 * pw < self.kernel_w {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!(
                    "kernel {}x{} larger than padded input {}x{}",
                    self.kernel_h,
                    self.kernel_w,
                    h + 2 * ph,
                    w + 2 * pw
                ),
            });
        }
        Ok((
            (h + 2 * ph - self.kernel_h) / self.stride + 1,
            (w + 2 * pw - self.kernel_w) / self.stride + 1,
        ))
    }

    /// Multiply-accumulates for one forward pass at the given input size.
    pub fn macs(&self, n: usize, h: usize, w: usize) -> Result<u64> {
        let (oh, ow) = self.output_hw(h, w)?;
        Ok((n * self.out_channels * oh * ow * self.in_per_group() * self.kernel_h * self.kernel_w)
            as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_even_kernel() {
        assert!(ConvSpec::new(2, 2, 2).validate().is_err());
        assert!(ConvSpec::new(2, 2, 3).with_kernel(3, 2).validate().is_err());
    }

    #[test]
    fn rejects_non_dividing_groups() {
        let err = ConvSpec::new(6, 4, 1).with_groups(3).validate().unwrap_err();
        assert!(err.to_string().contains("groups 3"));
    }

    #[test]
    fn stride_two_halves() {
        let spec = ConvSpec::new(3, 8, 3).with_stride(2);
        assert_eq!(spec.output_hw(224, 224).unwrap(), (112, 112));
        assert_eq!(spec.output_hw(7, 7).unwrap(), (4, 4));
        let pw = ConvSpec::new(3, 8, 1).with_stride(2);
        assert_eq!(pw.output_hw(224, 224).unwrap(), (112, 112));
    }

    #[test]
    fn asymmetric_padding() {
        let spec = ConvSpec::new(1, 1, 3).with_kernel(3, 1);
        assert_eq!(spec.padding(), (1, 0));
        assert_eq!(spec.output_hw(5, 5).unwrap(), (5, 5));
    }
}
