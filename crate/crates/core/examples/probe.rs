// Scratch probe for desk-scale indicator dynamics; not part of the suite.
use fedsim_core::data::*;
use fedsim_core::defenses::*;
use fedsim_core::nn::*;
use fedsim_core::rng::*;
use fedsim_core::train::*;

fn main() {
    let (train_ds, _test) = gen_synthetic_split::<f64>(10, 8, 100, 20, SYNTH_NOISE_STD, 7).unwrap();
    let arch = ModelArch::mlp(vec![1, 8, 8], 64, 10);
    let mut global = init_model::<f64>(&arch, &mut CounterRng::derive(7, &[purpose::MODEL_INIT])).unwrap();
    run_sgd(&mut global, &train_ds, 0.05, 200, 64, &mut CounterRng::new(8)).unwrap();

    let spec = TriggerSpec::corner_block(3);
    let poisoned = build_poison_dataset(&train_ds, &spec, 200, 15, None).unwrap();
    let source = gen_synthetic::<f64>(10, 8, 40, 99).unwrap();
    for size in [150usize, 200, 250] {
        for e_iters in [300usize, 400, 500, 700] {
            let ind = build_indicator_dataset(&source, size, 10, &train_ds.name, 13, false).unwrap();
            let (w_ind, state) = indicator_inject(
                &global, &ind, 0.1, e_iters, 0.05, 64, 95.0, &mut CounterRng::new(14),
            ).unwrap();
            let (_, a0, _) = indicator_accuracy(&state, &w_ind).unwrap();
            let mut bvals = Vec::new();
            let mut pvals = Vec::new();
            for seed in 0..5u64 {
                let mut b = w_ind.clone();
                run_sgd(&mut b, &train_ds, 0.05, 200, 64, &mut CounterRng::new(100 + seed)).unwrap();
                let (_, ab, _) = indicator_accuracy(&state, &b).unwrap();
                bvals.push(ab);
                let mut pm = w_ind.clone();
                run_sgd(&mut pm, &poisoned, 0.05, 200, 64, &mut CounterRng::new(200 + seed)).unwrap();
                let (_, ap, _) = indicator_accuracy(&state, &pm).unwrap();
                pvals.push(ap);
            }
            let fmt = |v: &Vec<f64>| v.iter().map(|x| format!("{x:.0}")).collect::<Vec<_>>().join(",");
            println!("size={size} E={e_iters}: a0={a0:.1} benign=[{}] backdoor=[{}]", fmt(&bvals), fmt(&pvals));
        }
    }

    // Erosion curve at the best point: benign steps vs alpha, and attacker
    // iteration counts at two plrs.
    let ind = build_indicator_dataset(&source, 200, 10, &train_ds.name, 13, false).unwrap();
    let (w_ind, state) = indicator_inject(&global, &ind, 0.1, 500, 0.05, 64, 95.0, &mut CounterRng::new(14)).unwrap();
    let (_, a0, _) = indicator_accuracy(&state, &w_ind).unwrap();
    print!("erosion a0={a0:.1} steps:");
    for steps in [2usize, 5, 10, 25, 50, 100, 200] {
        let mut b = w_ind.clone();
        run_sgd(&mut b, &train_ds, 0.05, steps, 64, &mut CounterRng::new(300)).unwrap();
        let (_, ab, _) = indicator_accuracy(&state, &b).unwrap();
        print!(" {steps}->{ab:.0}");
    }
    println!();
    for plr in [0.01, 0.025, 0.05] {
        print!("backdoor plr={plr}:");
        for iters in [25usize, 50, 100, 200] {
            let mut pm = w_ind.clone();
            run_sgd(&mut pm, &poisoned, plr, iters, 64, &mut CounterRng::new(400)).unwrap();
            let (_, ap, _) = indicator_accuracy(&state, &pm).unwrap();
            print!(" {iters}->{ap:.0}");
        }
        println!();
    }
}
