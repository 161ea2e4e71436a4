//! Print the closed-form cost model for the three inference regimes and
//! reconcile the streaming prediction with an instrumented run.

use streaming_vit::config::ModelConfig;
use streaming_vit::encoder::Encoder;
use streaming_vit::flops::{closed_form_flops, synthetic_frames, FlopMode};
use streaming_vit::tensor::Stage;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ModelConfig::compact();
    cfg.window = None;
    let frames = 8;

    for mode in [FlopMode::Frame, FlopMode::Streaming, FlopMode::Clip] {
        let report = closed_form_flops(&cfg, frames, mode)?;
        println!("{}", report.render());
        println!();
    }

    let predicted = closed_form_flops(&cfg, frames, FlopMode::Streaming)?;
    let inputs = synthetic_frames::<f32>(&cfg, frames);
    let mut enc = Encoder::<f32>::from_config(&cfg)?;
    enc.encode_sequence(&inputs)?;

    println!("stage-by-stage, closed form vs instrumented:");
    let mut all_equal = true;
    for stage in Stage::ALL {
        let want = predicted.stage(stage);
        let got = enc.counter().stage_macs(stage);
        all_equal &= want == got;
        println!(
            "  {:<16} {:>12} {:>12} {}",
            stage.name(),
            want,
            got,
            if want == got { "ok" } else { "MISMATCH" }
        );
    }
    println!("totals agree: {}", all_equal && predicted.total_macs() == enc.counter().macs());
    Ok(())
}
