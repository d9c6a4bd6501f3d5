use pnnseg::autodiff::{AdamState, Tape};
use pnnseg::nets::{build_unet, UNetConfig};
use pnnseg::runner::{batch_from_slices, synthetic_slices};
use pnnseg::volume::Rng;

fn main() {
    let slices = synthetic_slices(2, 64, 71582788);
    let images: Vec<_> = slices.iter().map(|(i, _)| i.clone()).collect();
    let targets: Vec<u8> = slices.iter().flat_map(|(_, m)| m.data.iter().copied()).collect();
    let batch = batch_from_slices(&images).unwrap();

    for (name, cfg) in [
        ("wide16", UNetConfig { depth: 2, init_filters: 16, in_channels: 1, class_count: 3 }),
        ("deep4", UNetConfig { depth: 4, init_filters: 4, in_channels: 1, class_count: 3 }),
    ] {
        let mut net = build_unet(cfg, &mut Rng::new(3)).unwrap();
        let mut adam = AdamState::new(1e-3).unwrap();
        for step in 0..201 {
            let mut tape = Tape::new();
            let x = tape.constant(batch.clone());
            let (logits, taped) = net.forward(&mut tape, x).unwrap();
            let loss = tape.softmax_cross_entropy(logits, &targets, 3).unwrap();
            if step % 50 == 0 {
                let probs = tape.softmax_channels(logits).unwrap();
                let plane = 64 * 64;
                let mut acc = 0.0; let mut n = 0;
                for ni in 0..2 { for p in 0..plane {
                    let t = targets[ni * plane + p] as usize;
                    if t > 0 { acc += tape.value(probs).data()[(ni * 3 + t) * plane + p]; n += 1; }
                }}
                println!("{name} step {step}: loss {:.4} fg {:.4}",
                    tape.value(loss).as_scalar().unwrap(), acc / n as f64);
            }
            tape.backward(loss).unwrap();
            net.params.absorb_grads(&tape, &taped);
            adam.step(&mut net.params.tensors_mut()).unwrap();
        }
    }
}
