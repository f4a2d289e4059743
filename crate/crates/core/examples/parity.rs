//! Binary64 emulation of the integer engine agrees bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rescale_lab::arch::{desk_cnn_v1, random_quantized_model};
use rescale_lab::cli::parity_check;

fn main() -> rescale_lab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = random_quantized_model(&desk_cnn_v1(), 32, &mut rng)?;
    for k in [32, 16, 8, 4, 2] {
        let report = parity_check(&model, k, 5, 4, k as u64)?;
        println!("k={k:>2}: {} of {} items differ", report.mismatched_items, report.items);
    }
    Ok(())
}
