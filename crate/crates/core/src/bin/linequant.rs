fn main() {
    std::process::exit(linequant::cli::main_with_args(std::env::args_os()));
}
