//! Turbo-style colour rendering of disparity maps.

use std::sync::OnceLock;

use acv_ndops::Tensor;

/// 256-entry RGB table from the published polynomial fit of the turbo map.
pub fn turbo_lut() -> &'static [[u8; 3]; 256] {
    static LUT: OnceLock<[[u8; 3]; 256]> = OnceLock::new();
    LUT.get_or_init(|| {
        let poly = |c: [f64; 6], x: f64| c.iter().rev().fold(0.0, |acc, &k| acc * x + k);
        let r = [0.13572138, 4.61539260, -42.66032258, 132.13108234, -152.94239396, 59.28637943];
        let g = [0.09140261, 2.19418839, 4.84296658, -14.18503333, 4.27729857, 2.82956604];
        let b = [0.10667330, 12.64194608, -60.58204836, 110.36276771, -89.90310912, 27.34824973];
        let mut lut = [[0u8; 3]; 256];
        for (i, px) in lut.iter_mut().enumerate() {
            let x = i as f64 / 255.0;
            for (o, c) in px.iter_mut().zip([r, g, b]) {
                *o = (poly(c, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        lut
    })
}

/// Interleaved RGB bytes for an `[H, W]` map scaled over `[0, max]`.
/// Non-finite values render black.
pub fn render(map: &Tensor<f64>, max: f64) -> Vec<u8> {
    let lut = turbo_lut();
    map.data()
        .iter()
        .flat_map(|&v| {
            if v.is_finite() {
                let t = (v / max.max(f64::MIN_POSITIVE)).clamp(0.0, 1.0);
                lut[(t * 255.0).round() as usize]
            } else {
                [0, 0, 0]
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lut_ends() {
        let lut = turbo_lut();
        // dark blue at the low end, dark red at the high end
        assert!(lut[25][2] > lut[25][0]);
        assert!(lut[255][0] > lut[255][2]);
        let m = Tensor::from_vec(&[1, 3], vec![0.0, f64::NAN, 10.0]).unwrap();
        let px = render(&m, 10.0);
        assert_eq!(&px[0..3], &lut[0]);
        assert_eq!(&px[3..6], &[0, 0, 0]);
        assert_eq!(&px[6..9], &lut[255]);
    }
}
