#pragma once

#include "fhirmap/chat.hpp"
#include "fhirmap/clustering.hpp"
#include "fhirmap/corpus.hpp"
#include "fhirmap/element_path.hpp"
#include "fhirmap/embedding_http.hpp"
#include "fhirmap/error.hpp"
#include "fhirmap/evaluation.hpp"
#include "fhirmap/fusion.hpp"
#include "fhirmap/http_transport.hpp"
#include "fhirmap/json_util.hpp"
#include "fhirmap/lexical.hpp"
#include "fhirmap/llm.hpp"
#include "fhirmap/pipeline.hpp"
#include "fhirmap/prompt.hpp"
#include "fhirmap/validation.hpp"
