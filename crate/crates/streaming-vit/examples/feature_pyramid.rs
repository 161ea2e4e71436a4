//! Encode one frame in frame mode and inspect the four-level feature
//! pyramid the resolution adaptor produces for dense downstream heads.

use streaming_vit::config::ModelConfig;
use streaming_vit::encoder::Encoder;
use streaming_vit::flops::synthetic_frames;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ModelConfig::compact();
    let frame = synthetic_frames::<f32>(&cfg, 1).remove(0);
    let mut enc = Encoder::<f32>::from_config(&cfg)?;
    let out = enc.encode_frame(&frame)?;

    println!(
        "input {}x{}, patch {} -> {}x{} tokens",
        cfg.image_h,
        cfg.image_w,
        cfg.patch,
        out.tokens.rows(),
        out.tokens.cols()
    );
    let pyramid = out.pyramid.expect("frame mode always builds the pyramid");
    for (i, (level, scale)) in pyramid.levels.iter().zip(["x4", "x2", "x1", "x1/2"]).enumerate() {
        let data = level.data();
        let mean = data.iter().map(|v| *v as f64).sum::<f64>() / data.len() as f64;
        let var = data.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>()
            / data.len() as f64;
        println!(
            "level {i} ({scale:>4}): shape {:?}  mean {mean:+.4}  std {:.4}",
            level.shape(),
            var.sqrt()
        );
    }
    Ok(())
}
