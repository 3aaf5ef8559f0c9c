fn main() {
    std::process::exit(basis_select::cli::run(std::env::args_os()));
}
