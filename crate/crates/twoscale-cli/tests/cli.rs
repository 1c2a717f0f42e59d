mod common;

use common::{exit_of, run_cli, stderr_of, stdout_of, workdir, write_config};

#[test]
fn simulate_writes_trajectory_and_repeats_byte_identically() {
    let dir = workdir("cli-simulate");
    let out = dir.join("out");
    let cfg = write_config(
        &dir,
        &format!(
            "problem = LINEAR1D\nseed = 11\nout_dir = {}\nschedule.n_max = 1500\nplan.n0 = 150\n",
            out.display()
        ),
    );
    let cfg = cfg.to_str().unwrap();

    let first = run_cli(&["--config", cfg, "simulate"]);
    assert_eq!(exit_of(&first), 0, "stderr: {}", stderr_of(&first));
    let table = out.join("trajectory.csv");
    let bytes_a = std::fs::read(&table).unwrap();
    assert!(bytes_a.starts_with(b"# config_hash="));

    let second = run_cli(&["--config", cfg, "simulate"]);
    assert_eq!(exit_of(&second), 0);
    let bytes_b = std::fs::read(&table).unwrap();
    assert_eq!(bytes_a, bytes_b);
}

#[test]
fn out_and_seed_overrides_apply() {
    let dir = workdir("cli-overrides");
    let cfg = write_config(
        &dir,
        &format!("problem = LINEAR1D\nout_dir = {}\nschedule.n_max = 800\n", dir.join("unused").display()),
    );
    let other = dir.join("elsewhere");
    let run = run_cli(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        other.to_str().unwrap(),
        "--seed",
        "99",
        "simulate",
    ]);
    assert_eq!(exit_of(&run), 0, "stderr: {}", stderr_of(&run));
    assert!(other.join("trajectory.csv").exists());
    assert!(!dir.join("unused").exists());
}

#[test]
fn invalid_schedule_exponent_exits_2() {
    let dir = workdir("cli-bad-alpha");
    let cfg = write_config(
        &dir,
        &format!("out_dir = {}\nschedule.alpha = 0.3\n", dir.join("out").display()),
    );
    let run = run_cli(&["--config", cfg.to_str().unwrap(), "simulate"]);
    assert_eq!(exit_of(&run), 2);
    assert!(stderr_of(&run).contains("alpha"));
}

#[test]
fn unknown_and_duplicate_config_keys_exit_2() {
    let dir = workdir("cli-bad-keys");
    let cfg = write_config(&dir, "plan.bogus = 3\n");
    let run = run_cli(&["--config", cfg.to_str().unwrap(), "simulate"]);
    assert_eq!(exit_of(&run), 2);
    assert!(stderr_of(&run).contains("plan.bogus"));

    let cfg = write_config(&dir, "seed = 1\nseed = 2\n");
    let run = run_cli(&["--config", cfg.to_str().unwrap(), "simulate"]);
    assert_eq!(exit_of(&run), 2);
    assert!(stderr_of(&run).contains("seed"));
}

#[test]
fn divergent_instance_exits_3() {
    let dir = workdir("cli-divergence");
    let cfg = write_config(
        &dir,
        &format!(
            "problem = UNSTABLE\nseed = 7\nout_dir = {}\nschedule.n_max = 2000\n",
            dir.join("out").display()
        ),
    );
    let run = run_cli(&["--config", cfg.to_str().unwrap(), "simulate"]);
    assert_eq!(exit_of(&run), 3);
    assert!(stderr_of(&run).contains("non-finite"));
}

#[test]
fn envelope_fit_on_growing_flow_exits_4() {
    let dir = workdir("cli-no-decay");
    let cfg = write_config(
        &dir,
        &format!("problem = UNSTABLE\nout_dir = {}\n", dir.join("out").display()),
    );
    let run = run_cli(&["--config", cfg.to_str().unwrap(), "phi"]);
    assert_eq!(exit_of(&run), 4);
    assert!(stderr_of(&run).contains("decay"));
}

#[test]
fn implausible_user_constants_exit_5() {
    let dir = workdir("cli-violation");
    // Claimed decay rate c2 = 50 is far beyond what scale-1 noise actually
    // delivers, so the measured exceedance must overshoot the tiny allowance.
    let cfg = write_config(
        &dir,
        &format!(
            concat!(
                "problem = LINEAR1D\n",
                "seed = 5\n",
                "out_dir = {}\n",
                "schedule.n_max = 3000\n",
                "noise.fast.scale = 1.0\n",
                "noise.slow.scale = 0.5\n",
                "constants.mode = user\n",
                "constants.c1 = 1.0\n",
                "constants.c2 = 50.0\n",
                "constants.u_l = 0.0\n",
                "constants.kappa_fast = 1.0\n",
                "constants.kappa_slow = 1.0\n",
                "plan.replications = 40\n",
                "plan.eps = 0.5\n",
                "plan.n0 = 300\n",
                "plan.r_b = 10\n",
            ),
            dir.join("out").display()
        ),
    );
    let run = run_cli(&["--config", cfg.to_str().unwrap(), "verify"]);
    assert_eq!(exit_of(&run), 5, "stdout: {}", stdout_of(&run));
    assert!(stdout_of(&run).contains("VIOLATION"));
    assert!(dir.join("out").join("report_fast.csv").exists());
    assert!(dir.join("out").join("report_slow.csv").exists());
}

#[test]
fn happy_path_commands_exit_0() {
    let dir = workdir("cli-happy");
    let out = dir.join("out");
    let cfg = write_config(
        &dir,
        &format!(
            concat!(
                "problem = LINEAR1D\n",
                "seed = 42\n",
                "out_dir = {}\n",
                "schedule.n_max = 1500\n",
                "plan.replications = 10\n",
                "plan.n0 = 150\n",
            ),
            out.display()
        ),
    );
    let cfg = cfg.to_str().unwrap();

    let bound = run_cli(&["--config", cfg, "bound"]);
    assert_eq!(exit_of(&bound), 0, "stderr: {}", stderr_of(&bound));
    assert!(out.join("bounds.csv").exists());

    let phi = run_cli(&["--config", cfg, "phi"]);
    assert_eq!(exit_of(&phi), 0, "stderr: {}", stderr_of(&phi));
    assert!(out.join("phi_fast.csv").exists());

    let verify = run_cli(&["--config", cfg, "verify"]);
    assert_eq!(exit_of(&verify), 0, "stderr: {}", stderr_of(&verify));
    assert!(!stdout_of(&verify).contains("VIOLATION"));

    let alekseev = run_cli(&["--config", cfg, "alekseev", "--dt", "1e-3"]);
    assert_eq!(exit_of(&alekseev), 0, "stderr: {}", stderr_of(&alekseev));

    let check = run_cli(&["--config", cfg, "check"]);
    assert_eq!(exit_of(&check), 0, "stdout: {}", stdout_of(&check));
    assert!(stdout_of(&check).contains("all checks passed"));
}
