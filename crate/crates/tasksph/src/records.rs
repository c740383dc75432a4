//! Transfer record layouts for the offload pipeline.
//!
//! Each record describes one particle plus the index range of the particles
//! it interacts with (`cf`/`cl`, inclusive, in record-array coordinates).
//! Fields are grouped in 16-byte blocks of 32-bit values so the layouts can
//! be moved as flat byte ranges.

/// Density loop input: position + h, velocity + mass, interaction range.
/// 40 bytes.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SendRecordDensity {
    pub x: [f32; 3],
    pub h: f32,
    pub v: [f32; 3],
    pub m: f32,
    pub cf: i32,
    pub cl: i32,
}

/// Density loop output: density sums and their h-derivatives, velocity curl
/// and divergence sums. 32 bytes.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RecvRecordDensity {
    pub rho: f32,
    pub rho_dh: f32,
    pub wcount: f32,
    pub wcount_dh: f32,
    pub curl: [f32; 3],
    pub div: f32,
}

/// Gradient loop input. 56 bytes. The fourth slot of the last float group
/// carries the particle mass, needed by the Laplacian estimate.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SendRecordGradient {
    pub x: [f32; 3],
    pub h: f32,
    pub v: [f32; 3],
    pub rho: f32,
    pub p: f32,
    pub cs: f32,
    pub u: f32,
    pub m: f32,
    pub cf: i32,
    pub cl: i32,
}

/// Gradient loop output. 16 bytes.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RecvRecordGradient {
    pub v_sig: f32,
    pub lap_u: f32,
    pub pad: [f32; 2],
}

/// Force loop input. 72 bytes.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SendRecordForce {
    pub x: [f32; 3],
    pub h: f32,
    pub v: [f32; 3],
    pub m: f32,
    pub rho: f32,
    pub p: f32,
    pub cs: f32,
    pub u: f32,
    pub f: f32,
    pub alpha_v_bal: f32,
    pub alpha_c: f32,
    pub v_sig: f32,
    pub cf: i32,
    pub cl: i32,
}

/// Force loop output. 32 bytes.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RecvRecordForce {
    pub a: [f32; 3],
    pub du_dt: f32,
    pub v_sig: f32,
    pub h_dt: f32,
    pub pad: [f32; 2],
}

/// Marker for types that are plain 32-bit field groups with no padding, safe
/// to view as raw bytes.
///
/// # Safety
/// Implementors must be `#[repr(C)]` with only f32/i32 fields (no padding)
/// and tolerate any bit pattern.
pub unsafe trait PodRecord: Copy + Default {}

unsafe impl PodRecord for SendRecordDensity {}
unsafe impl PodRecord for RecvRecordDensity {}
unsafe impl PodRecord for SendRecordGradient {}
unsafe impl PodRecord for RecvRecordGradient {}
unsafe impl PodRecord for SendRecordForce {}
unsafe impl PodRecord for RecvRecordForce {}

pub fn as_bytes<T: PodRecord>(recs: &[T]) -> &[u8] {
    // Safety: PodRecord guarantees no padding and no invalid bit patterns.
    unsafe {
        std::slice::from_raw_parts(recs.as_ptr() as *const u8, std::mem::size_of_val(recs))
    }
}

pub fn from_bytes<T: PodRecord>(bytes: &[u8]) -> Vec<T> {
    let size = std::mem::size_of::<T>();
    assert!(
        bytes.len() % size == 0,
        "byte range {} is not a whole number of {}-byte records",
        bytes.len(),
        size
    );
    let n = bytes.len() / size;
    let mut out = vec![T::default(); n];
    // Safety: same layout guarantee as as_bytes; alignment of the output
    // buffer is owned by the Vec.
    unsafe {
        std::ptr::copy_nonoverlapping(bytes.as_ptr(), out.as_mut_ptr() as *mut u8, bytes.len());
    }
    out
}

/// Average of the six record sizes; the device memory sizing formula uses the
/// rounded value 44.
pub fn mean_record_size() -> f64 {
    (std::mem::size_of::<SendRecordDensity>()
        + std::mem::size_of::<RecvRecordDensity>()
        + std::mem::size_of::<SendRecordGradient>()
        + std::mem::size_of::<RecvRecordGradient>()
        + std::mem::size_of::<SendRecordForce>()
        + std::mem::size_of::<RecvRecordForce>()) as f64
        / 6.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::mem::size_of;

    #[test]
    fn record_sizes_are_exact() {
        assert_eq!(size_of::<SendRecordDensity>(), 40);
        assert_eq!(size_of::<RecvRecordDensity>(), 32);
        assert_eq!(size_of::<SendRecordGradient>(), 56);
        assert_eq!(size_of::<RecvRecordGradient>(), 16);
        assert_eq!(size_of::<SendRecordForce>(), 72);
        assert_eq!(size_of::<RecvRecordForce>(), 32);
    }

    #[test]
    fn mean_size_near_44() {
        let mean = mean_record_size();
        assert!((mean - 44.0).abs() <= 4.0, "mean record size {mean}");
    }

    #[test]
    fn byte_round_trip() {
        let recs = vec![
            SendRecordDensity {
                x: [1.0, 2.0, 3.0],
                h: 0.5,
                v: [-1.0, 0.0, 4.0],
                m: 2.0,
                cf: 3,
                cl: 9,
            },
            SendRecordDensity::default(),
        ];
        let bytes = as_bytes(&recs);
        assert_eq!(bytes.len(), 80);
        let back: Vec<SendRecordDensity> = from_bytes(bytes);
        assert_eq!(back, recs);
    }
}
