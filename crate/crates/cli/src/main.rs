fn main() {
    std::process::exit(spatial_ddc_cli::cli_main(std::env::args_os()));
}
