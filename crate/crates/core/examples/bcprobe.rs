use deltabridge::env::TaskSpec;
use deltabridge::teacher::bc::*;
use deltabridge::teacher::{Backbone, BackboneConfig};

fn main() {
    let spec = TaskSpec::default();
    let bb: Backbone<f64> = Backbone::new(BackboneConfig::default(), 11).unwrap();
    let cfg = BcConfig { gate_sr: 0.0, ..BcConfig::default() };
    let t = std::time::Instant::now();
    let mut policy = train_policy(bb, &spec, PolicyKind::Flow, &cfg, 21).unwrap();
    println!("trained in {:.0}s", t.elapsed().as_secs_f64());
    for n in [1usize, 2, 4, 8, 10] {
        if let ActionHead::Flow { ref mut steps, .. } = policy.head {
            *steps = n;
        }
        let sr = eval_policy_sync(&policy, &spec, 200, 777).unwrap();
        println!("flow_steps={n}: SR {sr:.3}");
    }
}
