use knack_core::config::{ModelConfig, TrainConfig};
use knack_core::infer::generate;
use knack_core::model::KgModel;
use knack_core::params::Phase;
use knack_core::synth;
use knack_core::text::canonicalize;
use knack_core::train::Trainer;

fn probe_model_cfg() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.m = 16;
    cfg.encoder.layers = 2;
    cfg.encoder.width = 32;
    cfg.encoder.heads = 4;
    cfg.encoder.ffn_mult = 2;
    cfg.bottleneck.blocks = 2;
    cfg.bottleneck.heads = 4;
    cfg.bottleneck.ffn_mult = 2;
    cfg.decoder.layers = 2;
    cfg.decoder.width = 128;
    cfg.decoder.heads = 4;
    cfg.decoder.ffn_mult = 2;
    cfg.decoder.adapter_rank = 8;
    cfg.decoder.max_positions = 128;
    cfg
}

#[test]
#[ignore]
fn phase1_overfit_probe() {
    let t0 = std::time::Instant::now();
    let texts = synth::knowledge_corpus(32, 0);
    let vocab = synth::vocab_over(16, texts.iter().map(|s| s.as_str()), None);
    println!("vocab size {}", vocab.len());
    let model = KgModel::<f32>::build(probe_model_cfg(), vocab, 99).unwrap();

    let mut tc = TrainConfig::default();
    tc.phase1.learning_rate = 1e-2;
    tc.align_per_vector = true;
    tc.phase1.warmup_steps = 20;
    tc.phase1.batch_size = 8;
    let mut trainer = Trainer::new(model, Phase::KnowledgeCompression, tc, 500).unwrap();

    let step0 = trainer.kc_eval(&texts).unwrap();
    println!("step0: recon {:.4} align {:.4}", step0.recon, step0.align);
    let mut step = 0;
    'outer: for epoch in 0..200 {
        for chunk in texts.chunks(8) {
            trainer.kc_step(&chunk.to_vec()).unwrap();
            step += 1;
            if step % 50 == 0 {
                let m = trainer.kc_eval(&texts).unwrap();
                println!(
                    "step {step}: recon {:.4} align {:.4} ratio {:.4} [{:.1}s]",
                    m.recon,
                    m.align,
                    m.align / step0.align,
                    t0.elapsed().as_secs_f64()
                );
            }
            if step >= 500 {
                break 'outer;
            }
        }
        let _ = epoch;
    }
    let fin = trainer.kc_eval(&texts).unwrap();
    println!(
        "final: recon {:.4} align-ratio {:.4} time {:.1}s",
        fin.recon,
        fin.align / step0.align,
        t0.elapsed().as_secs_f64()
    );
}

#[test]
#[ignore]
fn phase2_overfit_probe() {
    let t0 = std::time::Instant::now();
    let dialogues = synth::dialogue_set(8, 0);
    let vocab = synth::vocab_for_dialogues(16, &dialogues);
    println!("vocab size {}", vocab.len());
    let model = KgModel::<f32>::build(probe_model_cfg(), vocab, 7).unwrap();

    let mut tc = TrainConfig::default();
    tc.phase2.learning_rate = 5e-3;
    tc.phase2.warmup_steps = 10;
    tc.phase2.batch_size = 8;
    let mut trainer = Trainer::new(model, Phase::DialogueTuning, tc, 200).unwrap();

    let step0 = trainer.gen_eval(&dialogues).unwrap();
    println!("step0: gen {:.4}", step0.gen);
    for step in 1..=200 {
        trainer.gen_step(&dialogues).unwrap();
        if step % 40 == 0 {
            let m = trainer.gen_eval(&dialogues).unwrap();
            println!(
                "step {step}: gen {:.4} ratio {:.4} [{:.1}s]",
                m.gen,
                m.gen / step0.gen,
                t0.elapsed().as_secs_f64()
            );
        }
    }
    let fin = trainer.gen_eval(&dialogues).unwrap();
    println!("final gen {:.4} ratio {:.4}", fin.gen, fin.gen / step0.gen);

    let decode = knack_core::config::DecodeConfig {
        max_new_tokens: 16,
        ..Default::default()
    };
    let mut exact = 0;
    for d in &dialogues {
        let out = generate(&trainer.model, &d.context, &d.knowledge, &decode, true).unwrap();
        let want = canonicalize(&d.response);
        let hit = out.text == want;
        if hit {
            exact += 1;
        }
        println!("[{}] got {:?} want {:?}", if hit { "ok" } else { "xx" }, out.text, want);
    }
    println!("exact {exact}/8 time {:.1}s", t0.elapsed().as_secs_f64());
}
