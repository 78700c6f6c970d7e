#pragma once

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

namespace testutil {

class TempDir {
  public:
    TempDir() {
        std::string tmpl = "/tmp/cadm-test-XXXXXX";
        if (!::mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
        path_ = tmpl;
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::string& path() const { return path_; }
    std::string file(const std::string& name) const { return path_ + "/" + name; }

    std::string write(const std::string& name, const std::string& content, bool executable = false) const {
        std::string p = file(name);
        {
            std::ofstream out(p, std::ios::binary);
            out << content;
        }
        if (executable) std::filesystem::permissions(p, std::filesystem::perms::owner_all);
        return p;
    }

  private:
    std::string path_;
};

}  // namespace testutil
