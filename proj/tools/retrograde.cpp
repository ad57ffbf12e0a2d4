// retrograde — load a payload, map its instructions, and run it forward or
// backward under a single-stepping debug session (real ptrace child or the
// deterministic emulator). Payload bytes are the only thing written to
// stdout; step reports go to --report or stderr.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <retrograde/retrograde.hpp>

#if defined(__linux__)
#include <sys/wait.h>
#include <unistd.h>
#endif

namespace {

using namespace retrograde;

enum class Backend { emu, native };

Backend resolve_backend(const std::string& flag) {
    std::string choice = flag;
    if (choice.empty()) {
        const char* env = std::getenv("RETROGRADE_BACKEND");
        choice = env && *env ? env : "emu";
    }
    if (choice == "emu") return Backend::emu;
    if (choice == "native") return Backend::native;
    throw error(errc::parse_error, "unknown backend: " + choice);
}

std::unique_ptr<TraceSession> make_session(Backend backend, const PayloadImage& image) {
    if (backend == Backend::native) {
        if (!native_available())
            throw error(errc::unsupported_platform, "native backend is unavailable on this platform");
        return spawn_traced(image);
    }
    return emu_spawn(image);
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw error(errc::parse_error, "cannot open file: " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Map selection: an explicit --map file wins; otherwise decode the text
/// window, falling back to the payload's .map.json sidecar when the window
/// holds instructions outside the recognized subset.
AddressMap pick_map(const std::string& payload_path, const PayloadImage& image,
                    const std::string& map_flag, bool verbose) {
    if (!map_flag.empty()) {
        if (verbose) std::cerr << "map: " << map_flag << "\n";
        return import_map(read_text_file(map_flag));
    }
    try {
        AddressMap map = build_map(image);
        if (verbose) std::cerr << "map: decoded from payload text\n";
        return map;
    } catch (const error&) {
        std::string sidecar = payload_path + ".map.json";
        if (!std::filesystem::exists(sidecar)) throw;
        if (verbose) std::cerr << "map: sidecar " << sidecar << "\n";
        return import_map(read_text_file(sidecar));
    }
}

void emit_run(const TraceReport& report, const std::string& report_path) {
    std::cout.write(report.output.data(), static_cast<std::streamsize>(report.output.size()));
    std::cout.flush();
    if (!report_path.empty()) {
        std::ofstream out(report_path, std::ios::binary);
        if (!out) throw error(errc::parse_error, "cannot open report file: " + report_path);
        write_report_jsonl(report, out);
    } else {
        write_report_jsonl(report, std::cerr);
    }
}

int run_exit_code(const TraceReport& report) {
    switch (report.outcome) {
    case TraceReport::Outcome::exited: return report.exit_code;
    case TraceReport::Outcome::killed: return 128 + report.signal;
    case TraceReport::Outcome::controller_stopped: return 0;
    }
    return 0;
}

int map_error(const error& e) {
    std::cerr << "retrograde: " << e.what() << "\n";
    switch (e.code()) {
    case errc::map_mismatch: return 3;
    case errc::unsupported_platform:
    case errc::trace_refused: return 4;
    case errc::step_failed: return 5;
    default: return 2;
    }
}

int cmd_map(const std::string& payload_path, const std::string& out_path) {
    PayloadImage image = load_payload_file(payload_path);
    AddressMap map = build_map(image);
    std::string text = to_json_string(map);
    if (out_path == "-") {
        std::cout << text;
    } else {
        std::ofstream out(out_path, std::ios::binary);
        if (!out) throw error(errc::parse_error, "cannot open output file: " + out_path);
        out << text;
    }
    std::cerr << map.size() << " records\n";
    return 0;
}

int cmd_run(const std::string& payload_path, Backend backend, const std::string& mode,
            const std::string& map_flag, const std::string& report_path, bool quirk, bool verbose) {
    PayloadImage image = load_payload_file(payload_path);
    AddressMap map = pick_map(payload_path, image, map_flag, verbose);

    DirectionPolicy policy;
    policy.direction = mode == "reverse" ? Direction::reverse : Direction::forward;
    policy.paper_indexing = quirk;
    if (verbose)
        std::cerr << "run: " << mode << " over " << map.size() << " instructions, "
                  << (backend == Backend::native ? "native" : "emu") << " backend\n";

    auto session = make_session(backend, image);
    TraceReport report = run_directed(*session, map, policy);
    emit_run(report, report_path);
    return run_exit_code(report);
}

int cmd_trace(const std::string& payload_path, Backend backend, const std::string& rules_flag,
              const std::string& report_path, bool verbose) {
    PayloadImage image = load_payload_file(payload_path);
    std::vector<RewriteRule> rules;
    if (rules_flag != "none") rules.push_back(RewriteRule::paper_default());
    if (verbose)
        std::cerr << "trace: " << rules.size() << " rewrite rule(s), "
                  << (backend == Backend::native ? "native" : "emu") << " backend\n";

    auto session = make_session(backend, image);
    TraceReport report = run_rewriter(*session, rules);
    emit_run(report, report_path);
    return run_exit_code(report);
}

int cmd_probe() {
    if (probe_self() == ProbeResult::occupied) {
        std::cout << "occupied\n";
        return 1;
    }
    std::cout << "free\n";
    return 0;
}

int cmd_stage(const std::string& payload_path, bool verbose) {
#if defined(__linux__)
    PayloadImage image = load_payload_file(payload_path);
    std::vector<std::uint8_t> wrapped;
    const std::vector<std::uint8_t>* bytes = &image.file_bytes;
    if (image.format != ImageFormat::elf64) {
        wrapped = emit_minimal_elf(image);
        bytes = &wrapped;
    }
    StagedImage staged = memfd_stage(*bytes, "staged-payload");
    if (verbose) std::cerr << "stage: " << staged.path() << "\n";

    pid_t pid = fork();
    if (pid < 0) throw error(errc::spawn_failed, "fork failed");
    if (pid == 0) {
        std::string path = staged.self_path();
        char* argv[] = {const_cast<char*>(path.c_str()), nullptr};
        char* envp[] = {nullptr};
        execve(path.c_str(), argv, envp);
        _exit(127);
    }
    int status = 0;
    waitpid(pid, &status, 0);
    if (WIFEXITED(status)) return WEXITSTATUS(status);
    if (WIFSIGNALED(status)) return 128 + WTERMSIG(status);
    return 2;
#else
    (void)payload_path;
    (void)verbose;
    throw error(errc::unsupported_platform, "staging requires Linux");
#endif
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"payload mapper and reverse-order execution driver"};
    app.require_subcommand(1);

    std::string backend_flag;
    bool verbose = false;
    app.add_option("--backend", backend_flag, "debug backend: native or emu (env RETROGRADE_BACKEND)")
        ->check(CLI::IsMember({"native", "emu"}));
    app.add_flag("--verbose", verbose, "diagnostic notes on stderr");

    auto* map_cmd = app.add_subcommand("map", "decode a payload's text window into an address map");
    std::string map_payload, map_out;
    map_cmd->add_option("payload", map_payload, "payload file (ELF or flat image)")->required();
    map_cmd->add_option("out", map_out, "output JSON path, or - for stdout")->required();

    auto* run_cmd = app.add_subcommand("run", "single-step a payload across its address map");
    std::string run_payload, run_mode = "forward", run_map, run_report;
    bool run_quirk = false;
    run_cmd->add_option("payload", run_payload, "payload file")->required();
    run_cmd->add_option("--mode", run_mode, "step order: forward or reverse")
        ->check(CLI::IsMember({"forward", "reverse"}));
    run_cmd->add_option("--map", run_map, "use this address map instead of decoding");
    run_cmd->add_option("--report", run_report, "write the step report here instead of stderr");
    run_cmd->add_flag("--quirk-paper-indexing", run_quirk,
                      "reverse indexing starts two entries early (compatibility quirk)");

    auto* trace_cmd =
        app.add_subcommand("trace", "trace a payload at syscall granularity with rewriting");
    std::string trace_payload, trace_rules = "default", trace_report;
    trace_cmd->add_option("payload", trace_payload, "payload file")->required();
    trace_cmd
        ->add_option("--rules", trace_rules, "rewrite rules: default (10000 becomes write) or none")
        ->check(CLI::IsMember({"default", "none"}));
    trace_cmd->add_option("--report", trace_report, "write the event report here instead of stderr");

    auto* probe_cmd = app.add_subcommand("probe", "report whether this process can be traced");
    auto* stage_cmd = app.add_subcommand("stage", "exec a payload from anonymous memory");
    std::string stage_payload;
    stage_cmd->add_option("payload", stage_payload, "payload file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*map_cmd) return cmd_map(map_payload, map_out);
        if (*run_cmd)
            return cmd_run(run_payload, resolve_backend(backend_flag), run_mode, run_map, run_report,
                           run_quirk, verbose);
        if (*trace_cmd)
            return cmd_trace(trace_payload, resolve_backend(backend_flag), trace_rules, trace_report,
                             verbose);
        if (*probe_cmd) return cmd_probe();
        if (*stage_cmd) return cmd_stage(stage_payload, verbose);
    } catch (const error& e) {
        return map_error(e);
    } catch (const std::exception& e) {
        std::cerr << "retrograde: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
