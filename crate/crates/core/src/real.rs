use nalgebra::RealField;

/// Floating-point scalar the renderer and optimizer are generic over.
///
/// Training runs in `f32`; gradient checks run in `f64`.
pub trait Real: RealField + Copy + Default + Send + Sync + 'static {
    fn lit(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
