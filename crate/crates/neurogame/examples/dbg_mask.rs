use neurogame::layer::{NeurogameLayerConfig, TopP};
use neurogame::statmech::{payoff, EnergyParams};
use neurogame::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(57);
    let params = EnergyParams::default();
    let tiles_down = rng.random_range(1..=2usize);
    let tiles_across = rng.random_range(1..=4usize).min(8 / (2 * tiles_down)).max(1);
    let h = tiles_down * 2;
    let w = tiles_across * 2;
    let mut map = Tensor::<f64>::zeros(vec![h, w]);
    for v in map.data_mut() {
        *v = rng.random_range(0.0..2.0);
    }
    let iteration = rng.random_range(1..=30u64);
    let cfg = NeurogameLayerConfig {
        top_p: TopP::Fraction(rng.random_range(0.3..1.0)),
        ..NeurogameLayerConfig::default()
    };
    let m = tiles_down * tiles_across;
    let floor = 1e-6f64;
    let kbt = 1.38e-23 * 1e23 / (1.0 + iteration as f64).ln();
    let tile_acts = |tid: usize| -> Vec<f64> {
        let (tr, tc) = (tid / tiles_across, tid % tiles_across);
        let mut acts = Vec::new();
        for r in 0..2 { for c in 0..2 { acts.push(map.at(&[tr*2+r, tc*2+c]).max(floor)); } }
        acts
    };
    let adjacency = [(0usize,1usize),(0,2),(1,3),(2,3)];
    let sub_energy = |acts: &[f64], members: &[bool]| -> f64 {
        adjacency.iter().filter(|(p,q)| members[*p] && members[*q]).map(|(p,q)| 1.0/(acts[*p]*acts[*q])).sum()
    };
    let energies: Vec<f64> = (0..m).map(|t| sub_energy(&tile_acts(t), &[true;4])).collect();
    let q: f64 = energies.iter().map(|e| (-e / kbt).exp()).sum();
    let payoffs: Vec<f64> = energies.iter().map(|&e| payoff((-e/kbt).exp()/q, &params)).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| payoffs[b].partial_cmp(&payoffs[a]).unwrap().then(a.cmp(&b)));
    let top = match cfg.top_p { TopP::Fraction(f) => { println!("f={f}"); (f * m as f64 - 1e-9).ceil() as usize }, TopP::Count(k) => k };
    let keep_n = top.max(1).min(m);
    println!("payoffs={payoffs:?}\norder={order:?} keep_n={keep_n} winning={:?}", &order[..keep_n]);
}
