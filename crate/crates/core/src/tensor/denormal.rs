/// Treats subnormal floats as zero on the current thread until dropped.
///
/// Long training runs drive some intermediate products into the subnormal
/// range, where x86 arithmetic slows down by two orders of magnitude. The
/// flag only changes results that were already below `f32::MIN_POSITIVE`.
/// On targets without the control register this is a no-op.
pub struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

#[cfg(target_arch = "x86_64")]
const FTZ_DAZ: u32 = 0x8040;

impl FlushDenormals {
    #[allow(deprecated)]
    pub fn enable() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
            // SAFETY: SSE is baseline on x86_64; only the FTZ/DAZ bits change.
            let saved = unsafe { _mm_getcsr() };
            unsafe { _mm_setcsr(saved | FTZ_DAZ) };
            FlushDenormals { saved }
        }
        #[cfg(not(target_arch = "x86_64"))]
        FlushDenormals {}
    }
}

impl Drop for FlushDenormals {
    #[allow(deprecated)]
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: restores the value read in `enable`.
        unsafe {
            std::arch::x86_64::_mm_setcsr(self.saved)
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[cfg(target_arch = "x86_64")]
    fn flushes_inside_the_guard_only() {
        // Opaque operands on every call so the product is not folded or
        // reused across the control-register writes.
        let product = || std::hint::black_box(f32::MIN_POSITIVE) * std::hint::black_box(0.5f32);
        assert!(product() > 0.0);
        {
            let _g = FlushDenormals::enable();
            assert_eq!(product(), 0.0);
            let _nested = FlushDenormals::enable();
        }
        assert!(product() > 0.0);
    }
}
