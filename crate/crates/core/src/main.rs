fn main() {
    std::process::exit(coupled_diffusion::cli::main_with_args(std::env::args_os()));
}
