#pragma once

#include <gtest/gtest.h>

#include <filesystem>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "distilrank/types.hpp"

template <typename E, typename F>
void expect_throw_containing(F&& f, std::initializer_list<std::string> needles) {
  try {
    f();
    ADD_FAILURE() << "expected an exception";
  } catch (const E& e) {
    const std::string what = e.what();
    for (const auto& n : needles) EXPECT_NE(what.find(n), std::string::npos) << "'" << n << "' not in: " << what;
  }
}

inline distilrank::DistilledExample make_example(const std::string& qid, std::vector<std::string> ids,
                                                 std::vector<int> ranks) {
  distilrank::DistilledExample ex;
  ex.query_id = qid;
  ex.query_text = "query " + qid;
  ex.doc_ids = std::move(ids);
  ex.llm_ranking = std::move(ranks);
  return ex;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& name) {
    path_ = std::filesystem::temp_directory_path() /
            ("distilrank_" + name + "_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
             std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};
