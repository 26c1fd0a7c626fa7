use mergeforge::bench::{fine_tuned_accuracy, pretrained_accuracy, train_suite};
use mergeforge::suite::generate_suite;
use mergeforge::Config;

#[test]
fn generation_is_deterministic() {
    let cfg = Config::default();
    let a = generate_suite(&cfg.suite, 5).unwrap();
    let b = generate_suite(&cfg.suite, 5).unwrap();
    let c = generate_suite(&cfg.suite, 6).unwrap();
    assert_eq!(a.in_domain_tasks, b.in_domain_tasks);
    assert_eq!(a.out_of_domain_tasks, b.out_of_domain_tasks);
    assert_eq!(a.pretrain_mixture, b.pretrain_mixture);
    assert_ne!(a.in_domain_tasks, c.in_domain_tasks);
}

#[test]
fn fine_tuning_beats_the_pretrained_model() {
    let cfg = Config::default();
    let suite = generate_suite(&cfg.suite, 1).unwrap();
    let trained = train_suite(&suite, &cfg, 1).unwrap();
    let ft = fine_tuned_accuracy(&suite, &trained).unwrap();
    let pre = pretrained_accuracy(&suite, &trained).unwrap();
    for ((task, f), p) in suite.in_domain_names().iter().zip(&ft).zip(&pre) {
        assert!(*f >= 0.90, "{task}: fine-tuned {f}");
        assert!(*p <= f - 0.10, "{task}: pretrained {p} vs fine-tuned {f}");
    }
}
