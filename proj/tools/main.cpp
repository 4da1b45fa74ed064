#include "vralign/cli_app.hpp"

int main(int argc, char** argv) { return vralign::run_cli(argc, argv); }
