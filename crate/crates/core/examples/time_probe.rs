// quick probe binary source (placed as example)
use std::time::Instant;
use cycgen::camera::make_view_grid;
use cycgen::conditions::{extract, ConditionKind};
use cycgen::dataset::{Dataset};
use cycgen::embed;
use cycgen::generator::Generator;
use cycgen::render::{render, RenderConfig};
use cycgen::tensor::Tape;
use cycgen::trainer::{init_model, prepare_scene, TrainConfig};
use cycgen::triplane::{PointDecoder, TriplaneField};
use cycgen::embed::Encoders;

fn main() {
    let ds = Dataset::open(std::path::Path::new("/tmp/cycsmoke/data64")).unwrap();
    let cfg = TrainConfig::default();
    let scene = ds.load_scene(0).unwrap();
    let sample = prepare_scene(&scene, ConditionKind::Edge, 32, 4.5).unwrap();
    let store = init_model(&cfg);
    let semantic = embed::init_params(3);
    let enc = Encoders::frozen(&semantic);
    let text = enc.encode_text(&sample.prompt).unwrap();
    let grid = make_view_grid(8, 4, 2.5, 50.0f32.to_radians(), 32);

    for round in 0..3 {
        let t0 = Instant::now();
        let tape = Tape::new();
        let leaves = store.leaves(&tape).unwrap();
        let gen = Generator::from_leaves(&cfg.gen, &leaves);
        let dec = PointDecoder::from_leaves(&leaves);
        let t_setup = t0.elapsed();

        let t1 = Instant::now();
        let tp = gen.generate(&sample.cond_input, &text, &sample.ref_pose).unwrap();
        let t_gen = t1.elapsed();

        let field = TriplaneField { triplane: &tp, decoder: &dec };
        let t2 = Instant::now();
        let r1 = render(&field, &grid.poses[0], &cfg.render, None).unwrap();
        let t_render = t2.elapsed();

        let t3 = Instant::now();
        let c1 = extract(ConditionKind::Edge, &r1).unwrap();
        let t_extract = t3.elapsed();

        let t4 = Instant::now();
        let loss = r1.image.mean().unwrap()
            .add(&c1.data.mean().unwrap()).unwrap()
            .add(&tp.planes.mean().unwrap()).unwrap();
        let t_loss = t4.elapsed();

        let t5 = Instant::now();
        let grads = tape.backward(&loss).unwrap();
        let t_back = t5.elapsed();
        let _ = grads;
        println!("round {round}: setup {:?} gen {:?} render {:?} extract {:?} loss {:?} backward {:?} nodes {}",
            t_setup, t_gen, t_render, t_extract, t_loss, t_back, tape.node_count());
    }
}
