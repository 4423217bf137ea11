use crate::error::{shape_err, Result};
use crate::tensor::{Element, Tensor};

/// `[B, C, H, W] -> [B, (H/p)(W/p), p*p*C]`; patches in row-major order,
/// features ordered (row in patch, column in patch, channel).
pub fn patchify<T: Element>(img: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let &[b, c, h, w] = img.shape() else {
        return shape_err(format!("patchify expects [B, C, H, W], got {:?}", img.shape()));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return shape_err(format!("image {h}x{w} is not divisible into {patch}x{patch} patches"));
    }
    let (gh, gw) = (h / patch, w / patch);
    img.reshape(&[b, c, gh, patch, gw, patch])?
        .permute(&[0, 2, 4, 3, 5, 1])?
        .reshape(&[b, gh * gw, patch * patch * c])
}

/// Inverse of [`patchify`] for an image of `channels x side_h x side_w`.
pub fn unpatchify<T: Element>(tokens: &Tensor<T>, patch: usize, channels: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let &[b, n, f] = tokens.shape() else {
        return shape_err(format!("unpatchify expects [B, N, F], got {:?}", tokens.shape()));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 || n != (h / patch) * (w / patch) || f != patch * patch * channels {
        return shape_err(format!(
            "tokens {:?} do not tile a {channels}x{h}x{w} image with patch {patch}",
            tokens.shape()
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    tokens
        .reshape(&[b, gh, gw, patch, patch, channels])?
        .permute(&[0, 5, 1, 3, 2, 4])?
        .reshape(&[b, channels, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_patch() {
        let img = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = patchify(&img, 2).unwrap();
        assert_eq!(t.shape(), &[1, 1, 4]);
        assert_eq!(t.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn row_major_patch_order() {
        // 1 channel 2x4 image, patch 2: left patch then right patch
        let img = Tensor::<f64>::from_f64(&[1, 1, 2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let t = patchify(&img, 2).unwrap();
        assert_eq!(t.to_vec(), vec![1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
    }

    #[test]
    fn indivisible_is_shape_error() {
        let img = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        assert!(matches!(patchify(&img, 2), Err(crate::Error::Shape(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn patchify_is_a_bijection(b in 1usize..3, c in 1usize..4, gh in 1usize..4, gw in 1usize..4, p in 1usize..4, seed in 0u64..1000) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let img = Tensor::<f64>::randn(&[b, c, gh * p, gw * p], &mut rng);
            let t = patchify(&img, p).unwrap();
            prop_assert_eq!(t.shape(), &[b, gh * gw, p * p * c][..]);
            let back = unpatchify(&t, p, c, gh * p, gw * p).unwrap();
            prop_assert_eq!(back.to_vec(), img.to_vec());
        }
    }
}
