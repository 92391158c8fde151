fn main() {
    std::process::exit(tddm::harness::cli::run(std::env::args_os()));
}
