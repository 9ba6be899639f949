fn main() {
    std::process::exit(kernel_mfc::cli::run(std::env::args_os()));
}
