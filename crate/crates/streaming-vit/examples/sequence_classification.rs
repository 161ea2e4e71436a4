//! Run the full clip pipeline: stream a sequence through the encoder, pool
//! each frame, and score the clip with the temporal decoder.

use streaming_vit::config::{ModelConfig, TaskMode};
use streaming_vit::decoder::decode;
use streaming_vit::encoder::Encoder;
use streaming_vit::io::{gen_sequence, SequenceKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ModelConfig::compact();
    cfg.mode = TaskMode::Sequence;

    for (name, kind, seed) in [
        ("moving blob", SequenceKind::MovingBlob, 4),
        ("pure noise", SequenceKind::Noise, 4),
    ] {
        let clip = gen_sequence(kind, 6, cfg.image_h, cfg.image_w, seed)?;
        let mut enc = Encoder::<f32>::from_config(&cfg)?;
        let features = enc.encode_sequence(&clip)?;
        let grids: Vec<_> = features.into_iter().map(|f| f.tokens).collect();
        let logits = decode(&grids, &enc.weights().decoder, cfg.heads, enc.counter())?;

        let scores = logits.data();
        let best = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        let shown: Vec<String> = scores.iter().map(|s| format!("{s:+.3}")).collect();
        println!("{name}: logits [{}] -> class {best}", shown.join(", "));
    }
    println!("(untrained weights: the point is the plumbing, not the labels)");
    Ok(())
}
