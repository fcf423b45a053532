#pragma once

namespace tweo {

// Full command-line entry point: parses argv, dispatches the subcommand,
// turns domain errors into exit codes (0 ok, 1 contract/IO/numeric,
// 2 collapse) with a JSON trailer on stderr.
int cli_main(int argc, char** argv);

}  // namespace tweo
