use hydrocascade::config::{parse_config_str, TWO_PLANT_JSON};
use hydrocascade::ocp::{multistart, Problem};

#[test]
fn exact_profit_never_drops_across_stages() {
    let mut cfg = parse_config_str(TWO_PLANT_JSON).unwrap();
    cfg.grid.cells = 80;
    let problem = Problem::new(cfg.cascade().unwrap(), cfg.price_signal().unwrap(), cfg.time_grid().unwrap()).unwrap();
    let r = multistart(&problem, &cfg.solver).unwrap();
    let tol = 1e-6 * r.exact_profit.abs();
    for w in r.stages.windows(2) {
        assert!(
            w[1].exact_profit >= w[0].exact_profit - tol,
            "stage gamma {} eps {} alpha {}: {} after {}",
            w[1].gamma,
            w[1].epsilon,
            w[1].alpha,
            w[1].exact_profit,
            w[0].exact_profit
        );
    }
    assert!(r.exact_profit >= r.stages.last().unwrap().exact_profit - tol);
}
