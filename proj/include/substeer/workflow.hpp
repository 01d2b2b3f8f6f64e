#pragma once

#include "substeer/config.hpp"

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace substeer::workflow {

// Subcommand names in pipeline order.
const std::vector<std::string>& stage_names();

// Runs one stage against cfg.workdir and returns its one-line summary.
// Missing upstream artifacts raise UsageError naming the producing stage.
std::string run_stage(const std::string& name, const RunConfig& cfg);

std::string gen_corpus(const RunConfig& cfg);
std::string train_lm(const RunConfig& cfg);
std::string collect(const RunConfig& cfg);
std::string attribute(const RunConfig& cfg);
std::string grads(const RunConfig& cfg);
std::string discover(const RunConfig& cfg);
std::string steer_eval(const RunConfig& cfg);
std::string sweep(const RunConfig& cfg);
std::string strategies(const RunConfig& cfg);
std::string theory_check(const RunConfig& cfg);
std::string bench(const RunConfig& cfg);
std::string report(const RunConfig& cfg);

// Stage that writes the artifact with this paths.* key, empty if none.
std::string producer_of(const std::string& artifact);

// <dir>/<stage>.meta.json, relative to the workdir.
std::filesystem::path meta_path(const std::string& stage);

// Checks every stage's recorded output hashes against the files on disk and
// every recorded input hash against its producer's meta. Throws DataError on
// the first mismatch; returns the stages verified.
std::vector<std::string> verify_provenance(const RunConfig& cfg);

// Advisory exclusive lock on <workdir>/.lock for the lifetime of the object.
class WorkdirLock {
public:
    explicit WorkdirLock(const std::filesystem::path& workdir);
    ~WorkdirLock();
    WorkdirLock(const WorkdirLock&) = delete;
    WorkdirLock& operator=(const WorkdirLock&) = delete;

private:
    int fd_ = -1;
};

} // namespace substeer::workflow
