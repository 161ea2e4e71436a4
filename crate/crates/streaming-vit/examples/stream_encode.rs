//! Feed a synthetic clip through the encoder one frame at a time and watch
//! the per-layer memory pools fill up to their capacity.

use streaming_vit::config::ModelConfig;
use streaming_vit::encoder::Encoder;
use streaming_vit::io::{checksum_f32, gen_sequence, SequenceKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ModelConfig::compact();
    cfg.memory_capacity = Some(3);
    let frames = gen_sequence(SequenceKind::MovingBlob, 8, cfg.image_h, cfg.image_w, 42)?;

    let mut enc = Encoder::<f32>::from_config(&cfg)?;
    println!(
        "compact encoder: {}x{} input, {} layers, memory capacity {:?}",
        cfg.image_h, cfg.image_w, cfg.layers, cfg.memory_capacity
    );
    for (t, frame) in frames.iter().enumerate() {
        let start = std::time::Instant::now();
        let out = enc.encode_frame(frame)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        println!(
            "frame {t}: tokens {}x{}x{} checksum {:016x}  pools {:?}  {ms:.1} ms",
            out.tokens.rows(),
            out.tokens.cols(),
            out.tokens.channels(),
            checksum_f32(out.tokens.data()),
            enc.pool_lengths(),
        );
    }
    println!("total MACs: {}", enc.counter().macs());
    Ok(())
}
