#pragma once

#include <string>
#include <vector>

namespace testsupport {

struct SanitizeCase {
  std::string input;
  std::vector<std::string> forbidden;
  std::string expected;
};

// Shared fixture corpus covering dates, numbers, punctuation, forbidden
// terms in all casings and as substrings, and whitespace collapse.
inline const std::vector<SanitizeCase>& sanitize_corpus() {
  static const std::vector<SanitizeCase> cases = {
      {"Scan 01/02/2015: BRAF fusion, size 3.", {"braf", "fusion"}, "Scan size"},
      {"", {"x"}, ""},
      {"   ", {}, ""},
      {"typeA marker present.", {"typea"}, "marker present"},
      {"Marker TYPEB seen; typeb-positive margin.", {"typeb"}, "Marker seen margin"},
      {"Lesion at 12, 14, 16 measuring 3.5 cm.", {}, "Lesion at measuring cm"},
      {"Follow-up 2019-10-31 stable.", {}, "Followup stable"},
      {"No growth since 1/2/99 exam!", {}, "No growth since exam"},
      {"V600E variant noted", {"v600e"}, "variant noted"},
      {"V600E variant noted", {}, "V600E variant noted"},
      {"Dr. Smith's note: unremarkable...", {}, "Dr Smiths note unremarkable"},
      {"size:3mm depth:22mm", {}, "size3mm depth22mm"},
      {"BRAF BRAF BRAF", {"braf"}, ""},
      {"braf-like pattern, non-BRAF region", {"braf"}, "pattern region"},
      {"Report dated 31/12/2020, signed 01/01/2021.", {}, "Report dated signed"},
      {"  multiple   spaces\tand\ttabs\nhere  ", {}, "multiple spaces and tabs here"},
      {"ALK+ rearrangement (exon 20) suspected", {"alk"}, "rearrangement exon suspected"},
      {"99", {}, ""},
      {"a1 1a 11 aa", {}, "a1 1a aa"},
      {"Mixed CASE Typea TYPEA typeA intact", {"typea"}, "Mixed CASE intact"},
  };
  return cases;
}

}  // namespace testsupport
