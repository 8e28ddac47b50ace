fn main() {
    std::process::exit(gated_distill::cli::run());
}
