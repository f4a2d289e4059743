//! Save, reload and corrupt a model file.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rescale_lab::arch::{desk_cnn_v1, random_quantized_model};
use rescale_lab::container::{from_bytes, to_bytes};

fn main() -> rescale_lab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = random_quantized_model(&desk_cnn_v1(), 8, &mut rng)?;
    let bytes = to_bytes(&model)?;
    println!(
        "{} bytes, magic {:?}",
        bytes.len(),
        String::from_utf8_lossy(&bytes[..4])
    );
    let again = to_bytes(&from_bytes(&bytes)?)?;
    println!("save/load/save identical: {}", again == bytes);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    println!("bad magic: {}", from_bytes(&bad).unwrap_err());
    println!("truncated: {}", from_bytes(&bytes[..bytes.len() - 3]).unwrap_err());
    Ok(())
}
