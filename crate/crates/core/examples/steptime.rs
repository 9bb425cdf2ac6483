use hierseg::backbone::Backbone;
use hierseg::config::RunConfig;
use hierseg::data::synth::{render_sample, SyntheticSpec};
use hierseg::data::Sample;
use hierseg::model::SegModel;
use hierseg::params::ParamStore;
use hierseg::tensor::{PadMode, Tape, Tensor, TensorRef};
use hierseg::train::build_loss;
use hierseg::train::losses::LossWeights;
use std::time::Instant;

fn sample64() -> Sample {
    let spec = SyntheticSpec::default();
    let r = render_sample(&spec, 0);
    let (w, h) = (r.image.width, r.image.height);
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h { for x in 0..w { for c in 0..3 {
        data[c*h*w + y*w + x] = r.image.pixels[(y*w+x)*3+c] as f64 / 255.0;
    }}}
    Sample { image: Tensor::new(vec![3,h,w], data).unwrap(),
        semantic: r.semantic.labels, instance: r.instance.labels, height: h, width: w }
}

fn main() {
    let cfg = RunConfig::default();
    let mut store = ParamStore::new(1);
    let model = SegModel::build(&cfg, &mut store).unwrap();
    let sample = sample64();
    let weights = LossWeights::default();

    // components
    let iters = 50;
    // bind_all cost
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut tape = Tape::new();
        let _ = store.bind_all(&mut tape);
    }
    println!("bind_all: {:?}", t0.elapsed() / iters);

    // backbone only
    let mut bstore = ParamStore::new(1);
    let bb = Backbone::build(&cfg.backbone, &mut bstore).unwrap();
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut tape = Tape::new();
        let binding = bstore.bind_all_frozen(&mut tape);
        let img = tape.constant(&sample.image);
        let _ = bb.forward_with_hooks(&mut tape, &binding, img).unwrap();
    }
    println!("backbone fwd: {:?}", t0.elapsed() / iters);

    // raw conv timing: stem-like 3->16 s2 on 64x64 + stage convs
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut tape = Tape::new();
        let x = tape.constant(&sample.image);
        let w1 = tape.constant(&Tensor::full(vec![16,3,3,3], 0.01).unwrap());
        let y1 = tape.conv2d(x, w1, None, 2, 1, PadMode::Clamp).unwrap();
        let w2 = tape.constant(&Tensor::full(vec![32,16,3,3], 0.01).unwrap());
        let y2 = tape.conv2d(y1, w2, None, 2, 1, PadMode::Clamp).unwrap();
        let w3 = tape.constant(&Tensor::full(vec![32,32,3,3], 0.01).unwrap());
        let y3 = tape.conv2d(y2, w3, None, 1, 1, PadMode::Clamp).unwrap();
        let w4 = tape.constant(&Tensor::full(vec![48,32,3,3], 0.01).unwrap());
        let y4 = tape.conv2d(y3, w4, None, 2, 1, PadMode::Clamp).unwrap();
        let w5 = tape.constant(&Tensor::full(vec![48,48,3,3], 0.01).unwrap());
        let _ = tape.conv2d(y4, w5, None, 1, 1, PadMode::Clamp).unwrap();
    }
    println!("5 convs fwd: {:?}", t0.elapsed() / iters);

    // full fwd+bwd
    let t0 = Instant::now();
    for _ in 0..20 {
        let mut tape = Tape::new();
        let binding = store.bind_all(&mut tape);
        let fwd = model.forward(&mut tape, &binding, &sample.image).unwrap();
        let scale_refs: Vec<TensorRef> = model.backbone.scale_params().iter().map(|&id| binding.get(id)).collect();
        let (loss, _) = build_loss(&mut tape, &fwd.output, &sample, &weights, &scale_refs).unwrap();
        tape.backward(loss).unwrap();
        let _ = binding.gradients(&tape, &store);
    }
    println!("fwd+bwd: {:?}", t0.elapsed() / 20);
}
