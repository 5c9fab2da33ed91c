use crate::error::{Result, TryOnError};
use crate::tensor::{BinaryMask, Rect};

/// Processing window around a mask.
///
/// The tight bounding box grows by 15% of its size on every side, is
/// clamped to the image, and then becomes a square whose side is the
/// smallest multiple of `scale` covering it, centred on the clamped box and
/// shifted back inside the image. Sides are capped by the image size.
pub fn compute_crop(mask: &BinaryMask, scale: usize) -> Result<Rect> {
    let bbox = mask
        .bbox()
        .ok_or_else(|| TryOnError::argument("cannot crop around an empty mask"))?;
    let scale = scale.max(1);
    let (iw, ih) = (mask.width(), mask.height());
    let margin = |len: usize| (len * 15).div_ceil(100);

    let x0 = bbox.x.saturating_sub(margin(bbox.width));
    let y0 = bbox.y.saturating_sub(margin(bbox.height));
    let x1 = (bbox.x + bbox.width + margin(bbox.width)).min(iw);
    let y1 = (bbox.y + bbox.height + margin(bbox.height)).min(ih);

    let side = (x1 - x0).max(y1 - y0).div_ceil(scale) * scale;
    let (sw, sh) = (side.min(iw), side.min(ih));

    // Twice the centre, to stay in integers.
    let place = |lo: usize, hi: usize, len: usize, limit: usize| {
        let start = (lo + hi).saturating_sub(len) / 2;
        start.min(limit - len)
    };
    Ok(Rect {
        x: place(x0, x1, sw, iw),
        y: place(y0, y1, sh, ih),
        width: sw,
        height: sh,
    })
}
