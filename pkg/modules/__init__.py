# CLANN reranker modules
