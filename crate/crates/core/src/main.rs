fn main() {
    twohead::cli_main();
}
